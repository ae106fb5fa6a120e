"""Multi-GPU NUMA L2 cache side-channel simulator and attack toolkit."""
__version__ = "0.1.0"
