import re
from typing import List

ANALYZER_ID = "lower-alnum-v1"

# Alphanumeric runs; underscore counts as a separator
_TOKEN_PATTERN = re.compile(r"[^\W_]+", re.UNICODE)


def analyze(text: str) -> List[str]:
    """Lowercase and split on non-alphanumeric characters (no stemming, no stopwords)"""
    if not text:
        return []
    return _TOKEN_PATTERN.findall(text.lower())
