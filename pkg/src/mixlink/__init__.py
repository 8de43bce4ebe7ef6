"""Cross-domain account linking for mixing services.

A float64 numpy library for pretraining a domain-invariant feature
generator on labeled malicious-account data and reusing it, after a
light classifier fit, to match deposit and withdrawal accounts from
small or noisy pair supervision.
"""

from __future__ import annotations

__version__ = "0.1.0"
