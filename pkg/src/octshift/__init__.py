"""Cross-device OCT harmonization and covariate-shift evaluation on synthetic phantoms."""

__version__ = "0.1.0"
