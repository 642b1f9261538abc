"""
Violence Sentinel - Source package
Weakly supervised multimodal violence detection on synthetic feature bags
"""

__version__ = "1.0.0"
