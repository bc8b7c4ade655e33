"""Numerical laboratory for in-context learning as Bayesian model averaging.

Subpackages:

* :mod:`icl_bma_lab.concept_model` -- finite latent-concept sequence models
* :mod:`icl_bma_lab.bma` -- exact posterior updates and the regret harness
* :mod:`icl_bma_lab.kernel_attention` -- ridge/softmax attention and the
  Gaussian linear task
* :mod:`icl_bma_lab.transformer` -- bounded transformer, projected training
* :mod:`icl_bma_lab.robustness` -- corrupted-prompt and regret-split studies
* :mod:`icl_bma_lab.metrics` -- exact finite-distribution divergences
* :mod:`icl_bma_lab.cli` -- the ``icl-bma-lab`` experiment runner
"""

__version__ = "0.1.0"
