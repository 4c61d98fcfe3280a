"""Protected spatial sharing of a simulated GPU: PTX sandboxing, partition
allocation, a reference PTX interpreter and a multi-client manager."""

__version__ = "0.1.0"
