# Sharpness-diversity laboratory for flat ensembles

__version__ = "0.3.0"
