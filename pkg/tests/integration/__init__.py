"""
Integration tests for the creative generation workflow.

These run every stage end to end on synthetic logs with the mock LLM client,
so they need no network access, but they train and decode for real.
"""
