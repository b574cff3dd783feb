"""Compute kernels for the denoiser MLP.

``_mlp_cy`` is the compiled Cython build; ``_mlp_py`` is the numpy fallback
with the same call signatures. :mod:`polydpo.kernels` picks one at import.
"""
