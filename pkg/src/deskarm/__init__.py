"""Desk-scale arm control stack: IK, grasp maps, drawing, dealing, bin episodes, rules."""

__version__ = "0.1.0"
