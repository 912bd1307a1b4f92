import re

from loguru import logger


def sanitize_run_name(name: str) -> str:
    """Make a sweep value or user label safe as a directory name"""
    cleaned = re.sub(r'[<>:"/\\|?*\s]', '_', name).strip('. ')[:120]
    if cleaned != name:
        logger.debug(f"Run name '{name}' stored as '{cleaned or 'run'}'")
    return cleaned or "run"


def format_percentage(value: float, digits: int = 2) -> str:
    """Fraction in [0, 1] as a percentage string"""
    return f"{value * 100:.{digits}f}%"


def format_count(value: int) -> str:
    """Large integer with an SI suffix (parameter and MAC counts)"""
    for threshold, suffix in ((1e9, "G"), (1e6, "M"), (1e3, "K")):
        if abs(value) >= threshold:
            return f"{value / threshold:.2f}{suffix}"
    return str(value)
