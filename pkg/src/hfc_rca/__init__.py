"""Root-cause ranking and fault forecasting for HFC cable plants."""

__version__ = "0.1.0"
