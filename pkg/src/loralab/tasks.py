"""Synthetic skill corpora, character tokenizer, and exact-match evaluation.

All sequences share one fixed-width template:

    <instr> ":" <junk:2 chars> "|" <core> "="  ->  completion

The two junk characters are irrelevant context (they enlarge the prompt
space so composed splits can be disjoint); the core carries the problem.
The backbone is pretrained on an echo corpus (completion = core verbatim)
so that copying the core is shared substrate. Each skill then deviates
from plain echoing in its own way:

  lang  instructions m/n over letter cores (width 3 or 4); completion is
        the transformed core (m = mirror, n = shift each letter forward by
        one): "m:kf|abc=" -> "cba".
  math  instructions c/d/e/f over "a<op>b" cores (single-digit operands,
        op in +/-); completion restates the core, then '=', then the
        numeric result: "c:83|7+5=" -> "7+5=12".
  code  instructions b/k over width-4 bracket-prefix cores; completion
        restates the core, then '=', then the closers that balance it:
        "b:)(|(([(=" -> "(([(=)]))".

A composed task presents a mirror-encoded task core under the lang
instruction 'm' and expects the decoded core, '=', and the task answer:
"m:41|5+7=" -> "7+5=12". The decode phase needs the mirror skill, the
answer phase needs the task skill, and the two conflict token-by-token
with plain echoing, which is what per-token fusion weights arbitrate.

Exact surface formats are frozen by the golden corpora under tests/golden.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

# ---------------------------------------------------------------------------
# tokenizer

LETTERS = "abcdefghijklmnop"
DIGITS = "0123456789"
SYMBOLS = ":=+-|()[]"

BOS_TEXT = "<s>"
EOS_TEXT = "</s>"

VOCAB: list[str] = [BOS_TEXT, EOS_TEXT] + list(LETTERS) + list(DIGITS) + list(SYMBOLS)
BOS_ID = 0
EOS_ID = 1

_CHAR_TO_ID = {ch: i for i, ch in enumerate(VOCAB)}


def vocab_size() -> int:
    return len(VOCAB)


def encode(text: str) -> list[int]:
    try:
        return [_CHAR_TO_ID[ch] for ch in text]
    except KeyError as exc:
        raise InputError(f"character {exc.args[0]!r} is not in the vocabulary") from None


def decode(ids, keep_specials: bool = False) -> str:
    out = []
    for i in ids:
        if i < 0 or i >= len(VOCAB):
            raise InputError(f"token id {i} out of range")
        if not keep_specials and i in (BOS_ID, EOS_ID):
            continue
        out.append(VOCAB[i])
    return "".join(out)


def token_text(token_id: int) -> str:
    if token_id < 0 or token_id >= len(VOCAB):
        raise InputError(f"token id {token_id} out of range")
    return VOCAB[token_id]


# ---------------------------------------------------------------------------
# examples

@dataclass(frozen=True)
class Example:
    """One (prompt, completion) pair with its provenance tags."""

    prompt: str
    completion: str
    skill: str
    seed: int

    @property
    def prompt_tokens(self) -> list[int]:
        return [BOS_ID] + encode(self.prompt)

    @property
    def completion_tokens(self) -> list[int]:
        return encode(self.completion) + [EOS_ID]

    def tokens_and_mask(self) -> tuple[list[int], list[int]]:
        """Full token sequence and its completion-only loss mask."""
        p, c = self.prompt_tokens, self.completion_tokens
        return p + c, [0] * len(p) + [1] * len(c)


class Skill(enum.Enum):
    """The three adapter skills (the echo pretraining corpus is separate)."""

    LANG = "lang"
    MATH = "math"
    CODE = "code"


ECHO_INSTRUCTIONS = "ijgh"
MIRROR_ECHO_INSTRUCTIONS = "kl"  # pretraining-only: emit the core mirrored
DOUBLE_ECHO_INSTRUCTIONS = "ap"  # pretraining-only: emit core, '=', core again
LANG_INSTRUCTIONS = "mn"  # m = mirror, n = shift+1
MATH_INSTRUCTIONS = "cdef"
CODE_INSTRUCTIONS = "bo"
COMPOSED_INSTRUCTION = "m"  # composed prompts are mirror-encoded

_SHIFT = {ch: LETTERS[(i + 1) % len(LETTERS)] for i, ch in enumerate(LETTERS)}


def _lang_transform(instr: str, core: str) -> str:
    if instr == "m":
        return core[::-1]
    if instr == "n":
        return "".join(_SHIFT[ch] for ch in core)
    raise InputError(f"unknown lang instruction {instr!r}")


def _math_answer(core: str) -> str:
    for op in "+-":
        pos = core.find(op, 1)
        if pos > 0:
            a, b = int(core[:pos]), int(core[pos + 1 :])
            return str(a + b if op == "+" else a - b)
    raise InputError(f"malformed arithmetic core {core!r}")


_CLOSER = {"(": ")", "[": "]"}


def _code_answer(core: str) -> str:
    stack: list[str] = []
    for ch in core:
        if ch in _CLOSER:
            stack.append(ch)
        elif stack and ch == _CLOSER[stack[-1]]:
            stack.pop()
        else:
            raise InputError(f"invalid bracket prefix {core!r}")
    return "".join(_CLOSER[ch] for ch in reversed(stack))


def split_prompt(prompt: str) -> tuple[str, str, str]:
    """Break a prompt into (instruction, junk, core)."""
    if len(prompt) < 3 or prompt[1] != ":" or not prompt.endswith("="):
        raise InputError(f"malformed prompt {prompt!r}")
    body = prompt[2:-1]
    junk, _, core = body.rpartition("|")
    return prompt[0], junk, core


def gold_completion(example: Example) -> str:
    """Recompute the unique correct completion for any generated example."""
    instr, _, core = split_prompt(example.prompt)
    skill = example.skill
    if skill == "echo":
        if instr in MIRROR_ECHO_INSTRUCTIONS:
            return core[::-1]
        if instr in DOUBLE_ECHO_INSTRUCTIONS:
            return core + "=" + core
        return core
    if skill == Skill.LANG.value:
        return _lang_transform(instr, core)
    if skill == Skill.MATH.value:
        return core + "=" + _math_answer(core)
    if skill == Skill.CODE.value:
        return core + "=" + _code_answer(core)
    if skill.startswith("composed:"):
        task = skill.split(":", 1)[1]
        plain = core[::-1]
        answer = _math_answer(plain) if task == Skill.MATH.value else _code_answer(plain)
        return plain + "=" + answer
    raise InputError(f"unknown skill tag {skill!r}")


def validate_example(example: Example) -> bool:
    return example.completion == gold_completion(example)


# ---------------------------------------------------------------------------
# generators

JUNK_WIDTH = 2
CODE_CORE_WIDTH = 4
LANG_CORE_WIDTHS = (3, 4)


def _junk(rng: np.random.Generator, alphabet: str) -> str:
    return "".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), JUNK_WIDTH))


def _math_core(rng: np.random.Generator, force_palindrome: bool = False) -> str:
    op = "+" if rng.random() < 0.5 else "-"
    a = int(rng.integers(0, 10))
    if force_palindrome:
        b = a
    elif op == "-":
        b = int(rng.integers(0, a + 1))
    else:
        b = int(rng.integers(0, 10))
    return f"{a}{op}{b}"


def _bracket_core(rng: np.random.Generator, uniform: bool = False) -> str:
    if uniform:
        opener = "(" if rng.random() < 0.5 else "["
        return opener * CODE_CORE_WIDTH
    chars: list[str] = []
    stack: list[str] = []
    for _ in range(CODE_CORE_WIDTH):
        if stack and rng.random() < 0.4:
            chars.append(_CLOSER[stack.pop()])
        else:
            opener = "(" if rng.random() < 0.5 else "["
            stack.append(opener)
            chars.append(opener)
    return "".join(chars)


def _letter_core(rng: np.random.Generator) -> str:
    n = LANG_CORE_WIDTHS[int(rng.integers(0, len(LANG_CORE_WIDTHS)))]
    return "".join(LETTERS[int(i)] for i in rng.integers(0, len(LETTERS), n))


ECHO_POOL = LETTERS + DIGITS + "+-()[]"  # every char a skill may place in a core


def _mixed_core(rng: np.random.Generator) -> str:
    n = LANG_CORE_WIDTHS[int(rng.integers(0, len(LANG_CORE_WIDTHS)))]
    return "".join(ECHO_POOL[int(i)] for i in rng.integers(0, len(ECHO_POOL), n))


def _assemble(instr: str, junk: str, core: str) -> str:
    return f"{instr}:{junk}|{core}="


MIRROR_ECHO_SHARE = 0.3
DOUBLE_ECHO_SHARE = 0.3


def gen_echo_corpus(n: int, seed: int) -> list[Example]:
    """Backbone pretraining data: repeat the core verbatim, mirrored, or twice.

    The mirrored variant (instructions k/l) gives the backbone a latent,
    content-agnostic reversal circuit over the full payload alphabet; the
    double variant (a/p, completion "core=core") teaches emitting the '='
    marker mid-completion and continuing afterwards. Skill adapters bind
    their own instructions to these latent behaviors.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        draw = rng.random()
        if draw < MIRROR_ECHO_SHARE:
            pool = MIRROR_ECHO_INSTRUCTIONS
        elif draw < MIRROR_ECHO_SHARE + DOUBLE_ECHO_SHARE:
            pool = DOUBLE_ECHO_INSTRUCTIONS
        else:
            pool = ECHO_INSTRUCTIONS
        instr = pool[int(rng.integers(0, len(pool)))]
        junk = _junk(rng, ECHO_POOL)
        core = _mixed_core(rng)
        if instr in MIRROR_ECHO_INSTRUCTIONS:
            completion = core[::-1]
        elif instr in DOUBLE_ECHO_INSTRUCTIONS:
            completion = core + "=" + core
        else:
            completion = core
        out.append(Example(_assemble(instr, junk, core), completion, "echo", seed))
    return out


def gen_corpus(skill: Skill, n: int, seed: int) -> list[Example]:
    """Deterministic training corpus for one skill."""
    if n <= 0:
        raise InputError(f"corpus size must be positive, got {n}")
    rng = np.random.default_rng(seed)
    out: list[Example] = []
    for _ in range(n):
        if skill is Skill.LANG:
            instr = LANG_INSTRUCTIONS[int(rng.integers(0, len(LANG_INSTRUCTIONS)))]
            junk = _junk(rng, LETTERS)
            core = _letter_core(rng)
            completion = _lang_transform(instr, core)
        elif skill is Skill.MATH:
            instr = MATH_INSTRUCTIONS[int(rng.integers(0, len(MATH_INSTRUCTIONS)))]
            junk = _junk(rng, DIGITS)
            core = _math_core(rng)
            completion = core + "=" + _math_answer(core)
        elif skill is Skill.CODE:
            instr = CODE_INSTRUCTIONS[int(rng.integers(0, len(CODE_INSTRUCTIONS)))]
            junk = _junk(rng, "()[]")
            core = _bracket_core(rng)
            completion = core + "=" + _code_answer(core)
        else:
            raise InputError(f"unknown skill {skill}")
        out.append(Example(_assemble(instr, junk, core), completion, skill.value, seed))
    return out


PALINDROME_SHARE = 0.3  # composed cores whose mirror image equals themselves


def _composed_example(rng: np.random.Generator, task: Skill, seed: int) -> Example:
    palindrome = rng.random() < PALINDROME_SHARE
    if task is Skill.MATH:
        plain = _math_core(rng, force_palindrome=palindrome)
        junk = _junk(rng, DIGITS)
        answer = _math_answer(plain)
    else:
        plain = _bracket_core(rng, uniform=palindrome)
        junk = _junk(rng, "()[]")
        answer = _code_answer(plain)
    prompt = _assemble(COMPOSED_INSTRUCTION, junk, plain[::-1])
    return Example(prompt, plain + "=" + answer, f"composed:{task.value}", seed)


@dataclass(frozen=True)
class ComposedSplits:
    train: list[Example]
    val: list[Example]
    test: list[Example]


def gen_composed(
    lang_skill: Skill,
    task_skill: Skill,
    n_train: int = 200,
    n_val: int = 50,
    n_test: int = 50,
    seed: int = 0,
) -> ComposedSplits:
    """Disjoint-by-prompt composed splits for one (language, task) pair."""
    if lang_skill is not Skill.LANG:
        raise InputError(f"composed tasks pair the language skill with a task skill, got {lang_skill}")
    if task_skill not in (Skill.MATH, Skill.CODE):
        raise InputError(f"task skill must be math or code, got {task_skill}")
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    examples: list[Example] = []
    budget = 200 * (n_train + n_val + n_test)
    while len(examples) < n_train + n_val + n_test:
        if budget == 0:
            raise InputError("composed example space exhausted before filling the splits")
        budget -= 1
        ex = _composed_example(rng, task_skill, seed)
        if ex.prompt in seen:
            continue
        seen.add(ex.prompt)
        examples.append(ex)
    return ComposedSplits(
        train=examples[:n_train],
        val=examples[n_train : n_train + n_val],
        test=examples[n_train + n_val :],
    )


# ---------------------------------------------------------------------------
# serialization (line-delimited records; golden files are committed)

def dump_corpus(examples: list[Example]) -> str:
    lines = [
        json.dumps(
            {"prompt": ex.prompt, "completion": ex.completion, "skill": ex.skill, "seed": ex.seed},
            sort_keys=True,
        )
        for ex in examples
    ]
    return "\n".join(lines) + "\n"


def load_corpus(text: str) -> list[Example]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(Example(rec["prompt"], rec["completion"], rec["skill"], rec["seed"]))
    return out


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    prompt: str
    gold: str
    generated: str
    correct: bool


@dataclass
class Metrics:
    exact_match: float
    results: list[EvalResult] = field(repr=False, default_factory=list)


def evaluate(model, adapters, mixer, test_set: list[Example], trace=None) -> Metrics:
    """Greedy-decode every test prompt and score exact match on completions."""
    from .model import generate

    results = []
    for i, ex in enumerate(test_set):
        gold = ex.completion_tokens
        tokens, _ = generate(
            model,
            ex.prompt_tokens,
            max_new_tokens=len(gold) + 5,
            adapters=adapters,
            mixer=mixer,
            trace=trace,
            sequence_id=i,
        )
        generated = tokens[len(ex.prompt_tokens) :]
        correct = generated == gold
        results.append(
            EvalResult(ex.prompt, ex.completion, decode(generated), correct)
        )
    n = len(results)
    return Metrics(sum(r.correct for r in results) / n if n else 0.0, results)


def token_accuracy(model, adapters, mixer, examples: list[Example]) -> float:
    """Teacher-forced next-token accuracy over completion positions."""
    from .model import forward
    from .tensor import no_grad

    hits = total = 0
    with no_grad():
        for ex in examples:
            tokens, mask = ex.tokens_and_mask()
            logits, _, _ = forward(model, tokens[:-1], adapters=adapters, mixer=mixer)
            preds = logits.data.argmax(axis=-1)
            for t in range(len(tokens) - 1):
                if mask[t + 1]:
                    hits += int(preds[t] == tokens[t + 1])
                    total += 1
    return hits / total if total else 0.0
