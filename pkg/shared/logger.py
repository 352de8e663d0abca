import logging
import json
import os
import sys
from datetime import datetime, timezone


class JSONFormatter(logging.Formatter):
    def format(self, record):
        log_obj = {
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno
        }

        fields = getattr(record, 'fields', None)
        if fields:
            log_obj['fields'] = fields

        if record.exc_info:
            log_obj['exception'] = self.formatException(record.exc_info)

        return json.dumps(log_obj, default=str)


def get_logger(name):
    logger = logging.getLogger(name)
    logger.setLevel(os.environ.get('WMLAB_LOG_LEVEL', 'INFO').upper())

    logger.handlers = []
    logger.propagate = False

    # stderr keeps stdout free for command output
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JSONFormatter())
    logger.addHandler(handler)

    return logger
