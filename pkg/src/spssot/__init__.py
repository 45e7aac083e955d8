"""Semi-supervised optimal transport with a self-paced ensemble.

This package trains sepsis-style prediction models for a target domain that
has few labels, borrowing from a fully labeled source domain whose feature
distribution is shifted.

The main components are:

1. A shared feature generator and classifier trained by alternating between
   solving a label-adaptive optimal transport coupling and taking SGD steps on
   the alignment, classification, group entropic and centroid losses.
2. A self-paced ensemble that under-samples the majority class by hardness
   bins, moving its emphasis from borderline toward easy samples over members.
3. Two graphs: `preprocess_graph` windows raw ICU records into tabular
   features, and `graph` runs the method x seed experiment and writes the
   report.

All settings live on the dataclasses in `spssot.configuration`.
"""  # noqa

from spssot.graph import graph
from spssot.preprocess_graph import graph as preprocess_graph

__all__ = ["graph", "preprocess_graph"]
