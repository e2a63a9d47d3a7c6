"""medfdi: false-data-injection threat analysis for ML-enabled medical devices.

Models a device as a control structure, extracts its technologies from
documentation, retrieves and triages known vulnerabilities, generates
five-stage attack scenarios through an LLM gateway, and grades them with a
dual-judge harness. Every stage runs offline against fixtures and a scripted
mock provider.
"""

__version__ = "0.1.0"
