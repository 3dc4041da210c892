"""Longitudinal speech transformer for ALSFRS-R speech score prediction."""
