"""Multi-modal knowledge distillation for pedestrian trajectory forecasting."""

__version__ = "0.1.0"
