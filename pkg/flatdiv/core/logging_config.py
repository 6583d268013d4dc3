"""
Logging setup shared by the CLI and worker processes.
"""

import json
import logging
from typing import Optional

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s - Context: %(context)s'


class ContextFormatter(logging.Formatter):
    """Formatter that renders the ``context`` extra as JSON."""

    def format(self, record):
        if not hasattr(record, 'context'):
            record.context = '{}'
        elif isinstance(record.context, dict):
            record.context = json.dumps(record.context, default=str)
        else:
            record.context = str(record.context)
        return super().format(record)


def configure_logging(level: str = "INFO", stream: Optional[object] = None) -> None:
    """
    Configure root logging with the context formatter.

    Args:
        level: Log level name
        stream: Optional stream for the handler (defaults to stderr)
    """
    root = logging.getLogger()
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))

    if not root.handlers:
        root.addHandler(logging.StreamHandler(stream))

    for handler in root.handlers:
        handler.setFormatter(ContextFormatter(LOG_FORMAT))
