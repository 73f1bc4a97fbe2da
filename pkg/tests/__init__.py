"""
Unit tests for pill.
"""
