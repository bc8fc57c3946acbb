# StoX-Net crossbar simulator
__version__ = "0.3.0"
