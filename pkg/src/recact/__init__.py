"""Recurrent action models: xLSTM/attention backbones with verified
parallel/recurrent mode equivalence, return-conditioned behavior cloning on
built-in worlds, in-context-learning evaluation, and an inference benchmark
harness."""

__version__ = "0.1.0"
