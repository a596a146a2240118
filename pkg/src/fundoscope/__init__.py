"""Two-stage CNN lesion detection and NPDR grading for fundus images."""
__version__ = "0.1.0"
