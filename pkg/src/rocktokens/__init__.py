"""Detection, causal probing and mitigation of persistently high-loss token
types in on-policy distillation, with a tabular simulator for ground truth."""

__version__ = "0.1.0"
