import logging
from typing import Optional


_raiz: Optional[logging.Logger] = None


def _configurar_raiz() -> logging.Logger:
    global _raiz
    if _raiz is not None:
        return _raiz

    logger = logging.getLogger("codist")
    logger.setLevel(logging.INFO)

    ch = logging.StreamHandler()
    ch.setLevel(logging.DEBUG)
    fmt = logging.Formatter("%(asctime)s | %(levelname)s | %(message)s")
    ch.setFormatter(fmt)
    logger.addHandler(ch)
    logger.propagate = False

    _raiz = logger
    return logger


def get_logger(name: str = "codist") -> logging.Logger:
    raiz = _configurar_raiz()
    if name in ("", "codist"):
        return raiz
    return raiz.getChild(name.removeprefix("codist."))


def set_nivel(nivel: int) -> None:
    _configurar_raiz().setLevel(nivel)
