"""pijepa: a desk-scale lab for label-free surrogate pretraining on porous-media PDEs.

Physics oracles (Darcy, IMPES two-phase, advection-diffusion-reaction) generate
all data; the model stack is an operator-split latent predictive architecture
with an EMA target encoder, per-stage physics residuals, and variance/covariance
collapse regularization, plus FNO/PINO/scratch baselines and the evaluation,
ablation, and sample-complexity experiments that exercise them.
"""

__version__ = "0.1.0"
