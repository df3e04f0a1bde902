"""
Test Suite for the VCNN Vectorized CNN Framework
"""
