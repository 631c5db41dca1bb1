"""Self-supervision primitives: masking, mean teacher, losses and dynamic convolution."""
