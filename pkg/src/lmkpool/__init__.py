"""Landmark-pooling text embedding toolkit.

A self-contained dense-embedding stack built on numpy: a word-level
tokenizer with landmark insertion, a small bidirectional RoPE transformer
encoder with hand-written backprop, the full set of sequence pooling
strategies (CLS, mean, mean-every-k, landmark/multi-CLS marker mean,
latent attention), InfoNCE contrastive training, brute-force retrieval
evaluation, and diagnostic analyses for positional bias and long-context
extrapolation.
"""

__version__ = "0.1.0"
