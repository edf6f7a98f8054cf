"""Fixed crisis bundle shared by the golden-file test and its one-off recorder."""

from __future__ import annotations

import datetime as dt

from hedgeflow.conferences import CrisisBundle, TriggerKind
from hedgeflow.policy import ANALYSTS
from helpers import BTC

DATE = dt.date(2021, 5, 19)


def bundle(lambda3: float = 0.5) -> CrisisBundle:
    return CrisisBundle(
        crisis_agent=ANALYSTS[0],
        asset=BTC,
        triggers=(TriggerKind.THREE_DAY,),
        direction=-0.1022,
        market="BTC open 43000 high 43500 low 38000 close 38900; three-day move -10.22%",
        holdings="cash 13.2%, BTC 56.8%, DJI 20.0%, EURUSD 10.0%",
        cause="Dave: BTC triggered three-day move above 10%; the market is falling.",
        plan="BUY_QUARTER (buy the dip)",
        manager_suggestion="Otto: the decline threatens the tail-risk budget; cut exposure.",
        peer_suggestions=("Bob: my book is invested; trim risk while the move plays out.",
                          "Emily: my book is flat; stay disciplined."),
        position=2.5,
        lambda3=lambda3,
    )
