"""
Tests package for lob-impact.
"""
