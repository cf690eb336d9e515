"""
UFC Matcher

Dense image matching with unified feature and cost aggregation, trained on synthetic warps.
"""

__version__ = "0.1.0"
