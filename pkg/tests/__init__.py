"""
Test suite for SCD Siamese.
"""
