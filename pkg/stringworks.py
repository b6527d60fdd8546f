from __future__ import annotations
import math
from colorama import Fore, Style

NA = "NA"


def format_float(value: float) -> str:
    """
    Shortest round-trip text for a float (at most 17 significant digits).
    NaN is written as `NA`, infinities as `inf`/`-inf`.
    """
    value = float(value)
    if math.isnan(value):
        return NA
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)

def parse_float(text: str) -> float:
    """
    Inverse of `format_float`.
    """
    text = text.strip()
    if text == NA:
        return math.nan
    return float(text)

def format_ci(low: float, high: float, digits: int = 3) -> str:
    """
    Formats a confidence interval like `0.789-0.858`
    """
    if math.isnan(low) or math.isnan(high):
        return NA
    return f"{low:.{digits}f}-{high:.{digits}f}"

def format_estimate(value: float, low: float, high: float, digits: int = 3) -> str:
    """
    Formats an estimate with its interval like `0.825 (0.789-0.858)`
    """
    return f"{value:.{digits}f} ({format_ci(low, high, digits)})"

def error_text(text: str) -> str:
    return f"{Fore.RED}{text}{Style.RESET_ALL}"

def ok_text(text: str) -> str:
    return f"{Fore.GREEN}{text}{Style.RESET_ALL}"
