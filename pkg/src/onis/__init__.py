"""Desk-scale one-shot imitation with semantic skills and quantized dynamics codes.

Modules:
    autodiff: reverse-mode autodiff on 2-D arrays, vector quantization, parameter sets.
    world: the 2-D reaching world with drifting dynamics.
    dataset: expert rollouts and the offline dataset.
    multimodal: frozen video/language encoders and prompt learning.
    skillseq: S-mode and U-mode skill sequences and the skill decoder.
    dynamics: the quantized dynamics encoder, decoder and temporal contrast.
    transfer: the skill transfer policy and its joint training loop.
    deploy: deployment episodes, demo corruption and the flat-BC baseline.
    pipeline: staged training and bundle persistence.
    studies: ablation studies.
    reporting: metrics and CSV/JSON tables.
    cli: the ``onis`` command.
"""

__version__ = "0.1.0"
