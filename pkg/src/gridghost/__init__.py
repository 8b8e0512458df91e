"""Deception-attack testbed for a simulated Modbus/TCP distribution grid."""

__version__ = "0.1.0"
