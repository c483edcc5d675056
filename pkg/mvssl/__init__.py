"""mvssl: multi-view vision-language self-supervised training at desk scale.

Modules:
- tensor_core: numpy-backed reverse-mode autodiff tensor and gradient oracle
- encoders: visual encoder, frozen text encoder, view-aware fusion, checkpoints
- losses: multi-view decorrelation, vision-language alignment, redundancy minimization
- data: synthetic multiview generator, augmentations, rank pooling, prompt bank, folds
- train: Adam training loop
- evaluation: zero-shot classification, cross-validation, cross-domain, ablation
- cli: single command-line entry point
"""

__version__ = "0.3.0"
