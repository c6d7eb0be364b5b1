"""Style-based face aging for age-diversity augmentation of face datasets."""

__version__ = "0.1.0"
