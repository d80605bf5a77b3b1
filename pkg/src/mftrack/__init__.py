"""Multi-modal (RGB + thermal) discriminative-filter tracking at desk scale."""
__version__ = "0.1.0"
