"""maskedit: free-shape-mask + instruction image editing at toy scale."""

__version__ = "0.1.0"
