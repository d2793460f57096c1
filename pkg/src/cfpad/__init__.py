"""Face presentation-attack detection with class-guided style mixing and counterfactual intervention."""

__version__ = "0.1.0"
