"""
Configuración de logging: un objeto JSON por línea, o texto plano con --human-logs.

Los campos extra pasados con `logger.info("evento", extra={...})` se copian
al objeto JSON.
"""

import json
import logging
import sys
from datetime import datetime, timezone

# Atributos estándar de LogRecord que no se exportan como campos extra
_RESERVED = set(vars(logging.LogRecord("", 0, "", 0, "", (), None))) | {"message", "asctime"}


class JsonLineFormatter(logging.Formatter):
    """Formatea cada registro como una línea JSON."""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(),
            "level": record.levelname.lower(),
            "logger": record.name,
            "event": record.getMessage(),
        }
        for key, value in vars(record).items():
            if key not in _RESERVED and not key.startswith("_"):
                payload[key] = value
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str, ensure_ascii=False)


def configure_logging(human: bool = False, level: int = logging.INFO) -> None:
    """
    Instala el handler raíz del paquete.
    - human=False: líneas JSON (por defecto)
    - human=True: texto legible
    """
    handler = logging.StreamHandler(sys.stderr)
    if human:
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    else:
        handler.setFormatter(JsonLineFormatter())

    root = logging.getLogger("evoscene")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False
