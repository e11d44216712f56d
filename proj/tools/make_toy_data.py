#!/usr/bin/env python3
"""Writes the toy fixtures under data/toy/.

Twenty-five invented countries with four facts each give a 100-passage corpus
whose passage titles are the answer entities. Output is fully determined by
the fixed seed, so rerunning this script reproduces the committed files.
"""

import json
import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "data" / "toy"
rng = random.Random(20240)

ONSETS = ["b", "d", "k", "l", "m", "n", "r", "s", "t", "v", "z", "th", "br", "dr", "gr", "kr", "st", "tr"]
VOWELS = ["a", "e", "i", "o", "u", "ae", "io"]
CODAS = ["", "n", "r", "l", "s", "th", "nd", "rk"]


def word(syllables):
    return "".join(rng.choice(ONSETS) + rng.choice(VOWELS) + rng.choice(CODAS) for _ in range(syllables)).capitalize()


used = set()


def fresh(syllables, suffix=""):
    while True:
        w = word(syllables) + suffix
        if w.lower() not in used:
            used.add(w.lower())
            return w


countries = []
for _ in range(25):
    countries.append(
        {
            "country": fresh(2, "ia"),
            "capital": fresh(2),
            "currency": fresh(2) + " mark",
            "language": fresh(2, "ic"),
            "mountain": "Mount " + fresh(2),
        }
    )

TEMPLATES = {
    "capital": "{capital} is the capital city of {country}. The government of {country} meets in {capital}, "
    "which sits on a wide plain near the coast.",
    "currency": "The {currency} is the official currency of {country}. Coins and notes of the {currency} "
    "are issued by the central bank of {country}.",
    "language": "{language} is the most widely spoken language in {country}. Schools in {country} teach "
    "{language} alongside two regional dialects.",
    "mountain": "{mountain} is the highest peak in {country}. Climbers reach the summit of {mountain} "
    "through a pass on its northern ridge.",
}
FACTS = list(TEMPLATES)

passages = []
for ci, c in enumerate(countries):
    for fact in FACTS:
        contents = TEMPLATES[fact].format(**c)
        # A neighbour mention on some passages adds cross-country distractors.
        if (ci + FACTS.index(fact)) % 3 == 0:
            other = countries[(ci + 7) % len(countries)]
            contents += f" Travellers from {other['country']} often compare it with home."
        passages.append({"id": f"p{len(passages) + 1:03d}", "title": c[fact], "contents": contents})

QUESTIONS = {
    "capital": ["What is the capital city of {country}?", "Where does the government of {country} meet?"],
    "currency": ["What is the official currency of {country}?", "Which money do people use in {country}?"],
    "language": ["Which language is most widely spoken in {country}?", "What do people speak in {country}?"],
    "mountain": ["What is the highest peak in {country}?", "Which summit do climbers in {country} aim for?"],
}

items = []
for i in range(10):
    c = countries[(i * 3) % len(countries)]
    fact = FACTS[i % len(FACTS)]
    # Odd items use a paraphrase that shares fewer terms with the answer passage.
    question = QUESTIONS[fact][i % 2].format(**c)
    items.append(
        {
            "id": f"toy-{i + 1:02d}",
            "question": question,
            "golden_answers": [c[fact]],
            "metadata": {"fact": fact, "paraphrased": bool(i % 2)},
        }
    )

# Long-form documents, one per country, for chunk-size sweeps.
documents = []
for c in countries:
    sentences = [
        f"{c['country']} is a small country on the western sea.",
        f"Its capital is {c['capital']}.",
        f"The capital has an old harbour and a stone bridge.",
        f"People in {c['country']} pay with the {c['currency']}.",
        f"The central bank prints new notes every spring.",
        f"Most residents speak {c['language']}.",
        f"Children also learn a second language at school.",
        f"The highest point of the country is {c['mountain']}.",
        f"Snow covers the summit for half of the year.",
        f"Fishing and farming are the main trades.",
        f"A railway links the coast with the mountains.",
        f"Visitors arrive mostly in the summer months.",
    ]
    documents.append({"id": c["country"].lower(), "title": c["country"], "text": " ".join(sentences)})

# Judger training: factual lookups retrieve, arithmetic and chit-chat do not.
skr = []
for c in countries[:10]:
    skr.append({"question": f"What is the capital city of {c['country']}?", "label": "retrieve"})
    skr.append({"question": f"Which language is spoken in {c['country']}?", "label": "retrieve"})
for a, b in [(2, 3), (7, 5), (12, 4), (9, 9), (15, 6), (21, 3), (8, 8), (30, 12), (11, 7), (4, 16)]:
    skr.append({"question": f"What is {a} plus {b}?", "label": "no_retrieve"})
for q in ["Hello, how are you today?", "Tell me a joke please.", "What is your favourite colour?",
          "Can you say good morning?", "Please repeat the word banana.", "Thank you very much!",
          "What rhymes with cat?", "Say something nice.", "How do you spell apple?", "Count from one to five."]:
    skr.append({"question": q, "label": "no_retrieve"})


def write_jsonl(name, rows):
    with open(OUT / name, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


OUT.mkdir(parents=True, exist_ok=True)
write_jsonl("corpus.jsonl", passages)
write_jsonl("dataset.jsonl", items)
write_jsonl("documents.jsonl", documents)
write_jsonl("skr_train.jsonl", skr)
print(f"wrote {len(passages)} passages, {len(items)} items, {len(documents)} documents, {len(skr)} judger examples")
