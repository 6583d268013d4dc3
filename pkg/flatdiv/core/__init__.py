# Core configuration, logging, errors and presets
