"""Simulation and calibration of the extended Chiarella trend/value agent model."""

__version__ = "0.1.0"
