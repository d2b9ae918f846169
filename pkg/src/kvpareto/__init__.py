"""Memory/accuracy trade-offs of KV cache quantization, chunked prefill and 4-bit weights."""

__version__ = "0.1.0"
