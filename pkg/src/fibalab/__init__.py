"""Facial identity backdoor attacks on face recognition pipelines, at toy scale."""

__version__ = "0.1.0"
