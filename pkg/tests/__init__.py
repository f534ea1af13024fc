# Tests Package

"""
Unit tests for RegionSpot.

Run tests with:
    pytest tests/
    pytest tests/ -v                    # verbose
    pytest tests/test_fusion.py         # specific file
"""
