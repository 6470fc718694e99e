"""Complaint triage pipeline: response gating, user typing, hierarchical issue
classification, template auto-replies and a scheduled ticketing batch job."""

__version__ = "0.1.0"
