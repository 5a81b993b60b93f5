"""Semantic-condition tuning for knowledge graph completion, end to end
on one machine: a relation-aware graph conditioner, a FiLM fusion layer,
and a small decoder LM, all on a from-scratch numpy autodiff core."""

__version__ = "0.1.0"
