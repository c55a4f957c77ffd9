"""
Tests for the aad agitation detection pipeline.
"""
