"""Step-wise variation regularization for small diffusion denoisers.

Modules: ``schedule`` (noise schedule, forward process), ``denoiser``
(residual-MLP noise predictor, LoRA), ``sampler`` (DDIM, guidance, slerp),
``training`` (denoising loss + regularizer), ``inversion`` (null-text
inversion, editing), ``evaluation`` (ISTD, reconstruction metrics, MMD),
``datasets``, ``checkpoint``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
