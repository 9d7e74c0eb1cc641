"""
pedqtl: pedigree-aware multivariate variance-component QTL mapping
"""

__version__ = "0.1.0"
