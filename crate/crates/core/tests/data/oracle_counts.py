"""Brute-force counts for mini.tsv, written without reference to the Rust code.

Outputs:
  mini.profile.raw.expected      profile of every line as a raw message
  mini.profile.labeled.expected  profile of the message field of record lines
  mini.stats.expected.tsv        word -> per-label counts over all records
"""
import sys


def tokenize(text):
    tokens = []
    i = 0
    cur = ""
    cur_kind = None
    while i < len(text):
        chunk = text[i:i + 5]
        if chunk.isascii() and chunk.lower() == "<num>":
            if cur_kind == "digit":
                tokens.append("<num>")
            elif cur:
                tokens.append(cur)
            cur, cur_kind = "", None
            tokens.append("<num>")
            i += 5
            continue
        c = text[i]
        if c.isnumeric():
            if cur_kind != "digit":
                if cur:
                    tokens.append(cur)
                cur, cur_kind = "", "digit"
        elif c.isalpha():
            if cur_kind == "digit":
                tokens.append("<num>")
                cur_kind = None
            cur += c.lower()
            cur_kind = "alpha"
        else:
            if cur_kind == "digit":
                tokens.append("<num>")
            elif cur:
                tokens.append(cur)
            cur, cur_kind = "", None
        i += 1
    if cur_kind == "digit":
        tokens.append("<num>")
    elif cur:
        tokens.append(cur)
    return tokens


def profile(lines, nbytes):
    counts = {}
    for text in lines:
        for t in tokenize(text):
            counts[t] = counts.get(t, 0) + 1
    total = len(lines)
    distinct = len(counts)
    buckets = [
        ("appear_once", sum(1 for c in counts.values() if c == 1)),
        ("below_5", sum(1 for c in counts.values() if c < 5)),
        ("below_10", sum(1 for c in counts.values() if c < 10)),
        ("below_20", sum(1 for c in counts.values() if c < 20)),
        ("per_10000_lines", sum(1 for c in counts.values() if c * 10000 >= total)),
        ("per_1000_lines", sum(1 for c in counts.values() if c * 1000 >= total)),
    ]
    out = ["dataset_size_bytes=%d" % nbytes, "total_lines=%d" % total, "distinct_words=%d" % distinct]
    for key, n in buckets:
        out.append("%s=%d" % (key, n))
    return "\n".join(out) + "\n"


def main(path):
    raw = open(path, "rb").read()
    text = raw.decode("utf-8")
    physical = text.split("\n")
    if physical and physical[-1] == "":
        physical.pop()
    physical = [l[:-1] if l.endswith("\r") else l for l in physical]

    open("mini.profile.raw.expected", "w").write(profile(physical, len(raw)))

    messages = []
    labels = None
    stats = {}
    for l in physical:
        if l.startswith("#labels\t"):
            labels = l.split("\t")[1:]
            continue
        if l.startswith("#") or not l.strip():
            continue
        parts = l.split("\t", 2)
        label = parts[0]
        msg = parts[2] if len(parts) == 3 else parts[1]
        messages.append(msg)
        k = labels.index(label)
        for t in tokenize(msg):
            row = stats.setdefault(t, [0] * len(labels))
            row[k] += 1
    labeled = [l for l in physical if not l.startswith("#")]
    label_msgs = []
    for l in labeled:
        parts = l.split("\t", 2)
        label_msgs.append(parts[2] if len(parts) == 3 else (parts[1] if len(parts) == 2 else ""))
    open("mini.profile.labeled.expected", "w").write(profile(label_msgs, len(raw)))

    with open("mini.stats.expected.tsv", "w", encoding="utf-8", newline="") as f:
        for word in sorted(stats, key=lambda w: w.encode("utf-8")):
            f.write("%s\t%s\n" % (word, ",".join(str(c) for c in stats[word])))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "mini.tsv")
