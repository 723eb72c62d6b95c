"""hyperfed: personalized federated learning via server-side hypernetworks.

A client is summarized by a descriptor (the mean embedding of a data batch);
a hypernetwork maps descriptors to ready-to-use personalized model weights.
The package contains the numpy network kernel, the split client/server
training protocol, loopback and TCP transports, baselines, heterogeneous
client populations, and evaluation/theory diagnostics.
"""

__version__ = "0.1.0"
