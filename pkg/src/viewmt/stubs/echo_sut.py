#!/usr/bin/env python3
"""Minimal external SUT for protocol tests.

Answers every classify request with uniform probabilities and every detect
request with a fixed 3x3 grid of points. ``--bad-id N`` makes the reply to
request N malformed.
"""
import argparse
import json
import sys


def reply(req, args):
    if args.bad_id is not None and req.get("id") == args.bad_id:
        return "{this is not json"
    if req.get("task") == "classify":
        k = args.classes
        return json.dumps({"id": req["id"], "probs": [1.0 / k] * k})
    w, h = req["width"], req["height"]
    pts = [[w * (i + 1) // 4, h * (j + 1) // 4, 1.0 - 0.1 * (3 * j + i)] for j in range(3) for i in range(3)]
    return json.dumps({"id": req["id"], "points": pts})


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--classes", type=int, default=3)
    ap.add_argument("--bad-id", type=int, default=None)
    args = ap.parse_args()
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        sys.stdout.write(reply(json.loads(line), args) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
