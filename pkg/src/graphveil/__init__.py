"""Hide a model's computational graph among generated look-alike subgraphs
before handing it to an untrusted graph optimizer."""

__version__ = "0.1.0"
