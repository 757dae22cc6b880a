"""Generative recipe design engine.

Two coupled diffusion models (a binary multinomial one for ingredient
selection and a score-based continuous one for ingredient quantities)
learned from a recipe corpus, plus scoring, fidelity validation, and
discovery pipelines.
"""

__version__ = "0.1.0"
