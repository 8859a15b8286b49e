"""Regenerates mini.tsv, the 1,000-line fixture corpus. Deterministic."""
import random

rng = random.Random(20241)
labels = ["normal", "network", "storage", "auth", "kernel"]
common = ["request", "completed", "failed", "on", "node", "from", "user", "error",
          "Error", "ERROR", "timeout", "disk", "block", "session", "opened", "closed"]
per_label = {
    "normal": ["heartbeat", "ok", "Scheduled", "job", "finished"],
    "network": ["connection", "refused", "packet", "loss", "socket", "reset"],
    "storage": ["volume", "sector", "read", "write", "remounted", "readonly"],
    "auth": ["login", "password", "token", "expired", "denied"],
    "kernel": ["panic", "oops", "segfault", "stack", "trace"],
}
specials = ["blk_%dx" % i for i in range(40)] + ["café", "naïve", "Ünïcode", "x<NUM>y", "<num>"]


def code(i):
    s = ""
    i += 1
    while i:
        i, r = divmod(i - 1, 26)
        s = chr(97 + r) + s
    return "zq" + s


tail = [code(i) for i in range(300)]
tail_weights = [1.0 / (k + 1) ** 1.1 for k in range(300)]
seps = [" ", " ", " ", "  ", ", ", ": ", "=", "-", "/", "; "]

lines = ["#labels\t" + "\t".join(labels), "# fixture corpus for exact count checks"]
while len(lines) < 1000:
    label = rng.choice(labels)
    n = rng.randint(0, 12)
    words = []
    for _ in range(n):
        r = rng.random()
        if r < 0.45:
            words.append(rng.choice(common))
        elif r < 0.72:
            words.append(rng.choice(per_label[label]))
        elif r < 0.84:
            words.append(str(rng.randint(0, 99999)))
        elif r < 0.90:
            words.append(rng.choice(common) + str(rng.randint(0, 99)))
        elif r < 0.96:
            words.append(rng.choice(specials))
        else:
            words.append(rng.choices(tail, tail_weights)[0])
    msg = ""
    for w in words:
        msg += w + rng.choice(seps)
    msg = msg.strip()
    kind = rng.random()
    if kind < 0.05:
        line = "%s\t%s" % (label, msg)
    elif kind < 0.08:
        line = "%s\tT-%d\t%s\r" % (label, rng.randint(1, 50), msg)
    else:
        task = "-" if rng.random() < 0.7 else "task%d" % rng.randint(1, 30)
        line = "%s\t%s\t%s" % (label, task, msg)
    if n == 0 and kind >= 0.05:
        line = "%s\t-\t" % label
    lines.append(line)

with open("mini.tsv", "w", encoding="utf-8", newline="") as f:
    f.write("\n".join(lines) + "\n")
