"""Visual-style recommender: two-tower model that re-ranks search candidates per user."""

__version__ = "0.1.0"
