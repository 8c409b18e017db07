"""Learned tracking-error tubes and tube MPC for a planner/tracker pair."""

__version__ = "0.1.0"
