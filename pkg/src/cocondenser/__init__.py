"""coCondenser pre-training and dense retrieval at desk scale, on a NumPy autodiff core."""

__version__ = "0.1.0"
