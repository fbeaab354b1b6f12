from .metrics import AggregateMetrics, RunMetrics, aggregate
from .oracle import OverheadModel, timeline_oracle

__all__ = ["AggregateMetrics", "RunMetrics", "aggregate", "OverheadModel", "timeline_oracle"]
