"""Regularity of mappings between sampled metric measure spaces."""
from .space import MetricMeasureSpace, uniform_grid
from .numbers import SampledMapping, RadiusSchedule, RadonWeight, asymptotic_field
from .certify import certify, Certificate

__all__ = ["MetricMeasureSpace", "uniform_grid", "SampledMapping", "RadiusSchedule",
           "RadonWeight", "asymptotic_field", "certify", "Certificate"]
