"""
Unit tests for the pill package and its commands.
"""
