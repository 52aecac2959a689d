"""Reference external scorer: counts document tokens that appear in the query.

Speaks the newline-delimited JSON protocol understood by
:class:`rank_perturb.external.ExternalRanker`. Run with
``python -m rank_perturb.overlap_scorer``.
"""

from __future__ import annotations

import json
import sys


def overlap(query: list[str], doc: list[str]) -> int:
    wanted = set(query)
    return sum(1 for t in doc if t in wanted)


def main() -> int:
    out = sys.stdout
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        msg = json.loads(line)
        if "hello" in msg:
            reply = {"hello": "overlap-scorer", "version": "1"}
        else:
            reply = {"id": msg["id"], "score": overlap(msg["query"], msg["doc"])}
        out.write(json.dumps(reply, sort_keys=True) + "\n")
        out.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
