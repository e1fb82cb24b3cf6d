"""NeuroDodge - asynchronous event-camera perception with spiking networks"""

__version__ = "1.0.0"
