#!/usr/bin/env python3
"""Regenerates tasks.jsonl: 210 short app prompts, half easy, half hard."""
import json

EASY_NOUNS = [
    "todo list", "kitchen timer", "note pad", "tip calculator", "habit tracker",
    "unit converter", "flash cards", "stopwatch", "shopping list", "mood diary",
    "recipe box", "step counter", "alarm clock", "word counter", "color picker",
]
HARD_NOUNS = [
    "maze solver", "chess clock", "budget ledger", "regex tester", "graph plotter",
    "markdown previewer", "invoice builder", "quiz engine", "sudoku helper",
    "packing planner", "workout scheduler", "library catalog", "poll runner",
    "expense splitter", "garden planner",
]
ADJECTIVES = ["simple", "small", "fast", "tiny", "clean", "smart", "plain"]


def main():
    lines = []
    idx = 1
    for subset, nouns in (("easy", EASY_NOUNS), ("hard", HARD_NOUNS)):
        for adj in ADJECTIVES:
            for noun in nouns:
                lines.append({
                    "task_id": f"t{idx:03d}",
                    "prompt": f"a {adj} {noun}",
                    "subset": subset,
                })
                idx += 1
    assert len(lines) == 210, len(lines)
    with open("tasks.jsonl", "w") as fh:
        for line in lines:
            fh.write(json.dumps(line) + "\n")


if __name__ == "__main__":
    main()
