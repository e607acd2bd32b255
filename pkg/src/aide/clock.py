"""Wall-clock source, centralized so deterministic harnesses can freeze it.

Consumers bind the ``now_ms`` function object; freezing changes what that
one object returns, so it applies everywhere at once.
"""

from __future__ import annotations

import time

_frozen: int | None = None


def now_ms() -> int:
    if _frozen is not None:
        return _frozen
    return int(time.time() * 1000)


def freeze(value_ms: int) -> None:
    global _frozen
    _frozen = value_ms


def unfreeze() -> None:
    global _frozen
    _frozen = None
