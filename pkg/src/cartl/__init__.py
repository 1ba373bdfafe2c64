"""Treatment effect estimation under covariate-adaptive randomization with
lasso adjustment and transfer learning from a source trial."""

__version__ = "0.1.0"
