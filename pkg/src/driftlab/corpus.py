"""Synthetic-grammar corpus plus line-delimited dataset ingestion.

The grammar keeps every role class (subjects, verbs in tensed forms,
objects, modifiers, topic markers, ...) as a disjoint token set, so a
sentence parses back to exactly one derivation and every task label can
be re-derived by rule:

    sentence := clause (CONJ clause)?
    clause   := SUBJ MOD* group+           (groups chain right-branching
    group    := (NEG)? VERB OBJ (TOPIC)?    relative clauses; the first
                                            group is the main predicate)

A group's verb agrees in number with its subject: the clause subject for
the first group, the previous group's object after that. Coordinated
sentences follow a narrative-order convention: first clause past tense,
second present. Violations of structure, agreement, or narrative order
are what the corruption-based tasks recover.
"""

import json
from dataclasses import dataclass, field

from .errors import ConfigurationError, GenerationError, IngestionError
from .seeding import rng_stream

CLS_ID, SEP_ID, UNK_ID, PAD_ID = 0, 1, 2, 3
CONTROL_TOKENS = ("<cls>", "<sep>", "<unk>", "<pad>")

MOD_ROLES = frozenset({"adj", "sent_pos", "sent_neg", "syn", "ant"})
SUBJ_ROLES = frozenset({"subj_sing", "subj_plur"})
OBJ_ROLES = frozenset({"obj_sing", "obj_plur"})
VERB_ROLES = frozenset({"verb_pres_sing", "verb_pres_plur", "verb_past"})

SYNTACTIC_TASKS = ("bshift", "tree_depth", "subj_num", "obj_num")
SEMANTIC_TASKS = ("tense", "paraphrase", "coord_inv")
PROBING_TASKS = SYNTACTIC_TASKS + SEMANTIC_TASKS
CONTINUAL_TASKS = ("topic", "sentiment", "entailment", "acceptability")
EXTRA_PAIR_TASKS = ("pair_paraphrase", "answer_match")

ORDER_PRESETS = {
    "order1": ["topic", "sentiment", "entailment", "acceptability"],
    "order2": ["acceptability", "entailment", "sentiment", "topic"],
    "order3": ["sentiment", "topic", "acceptability", "entailment"],
    "order4": ["pair_paraphrase", "topic", "acceptability", "entailment",
               "sentiment", "answer_match"],
    "order5": ["answer_match", "sentiment", "entailment", "acceptability",
               "topic", "pair_paraphrase"],
    "order6": ["entailment", "topic", "answer_match", "pair_paraphrase",
               "sentiment", "acceptability"],
}


@dataclass(frozen=True)
class GrammarSpec:
    seed: int = 0
    n_subjects: int = 12        # per number form
    n_objects: int = 12
    n_verbs: int = 12           # lexemes; three tensed forms each
    n_adjectives: int = 20
    n_topics: int = 5           # topic-marker clusters
    nouns_per_topic: int = 8
    n_sentiment: int = 8        # per polarity
    n_conjunctions: int = 3
    n_negations: int = 2
    n_synonym_pairs: int = 10
    n_antonym_pairs: int = 10
    max_mods: int = 2
    d_max: int = 3              # relative-clause nesting bound
    p_topic_slot: float = 0.3   # marker rate outside the topic task

    def __post_init__(self):
        counts = {
            "subjects": self.n_subjects, "objects": self.n_objects,
            "verbs": self.n_verbs, "adjectives": self.n_adjectives,
            "sentiment markers": self.n_sentiment,
            "conjunctions": self.n_conjunctions, "negations": self.n_negations,
            "synonym pairs": self.n_synonym_pairs, "antonym pairs": self.n_antonym_pairs,
            "nouns per topic": self.nouns_per_topic,
        }
        for name, count in counts.items():
            if count < 1:
                raise GenerationError(f"role class {name!r} is empty")
        if self.n_topics < 2:
            raise GenerationError("role class 'topics' needs at least 2 clusters")
        if self.d_max < 1:
            raise ConfigurationError("d_max must be at least 1")


@dataclass(frozen=True)
class SplitSizes:
    train: int = 2000
    validation: int = 500
    test: int = 500


@dataclass
class Example:
    tokens: list
    label: int
    second_segment: list | None = None
    meta: dict | None = None

    def key(self):
        second = tuple(self.second_segment) if self.second_segment is not None else None
        return (tuple(self.tokens), second)


@dataclass
class TaskSpec:
    task_id: str
    kind: str                 # "continual" | "probing"
    category: str | None      # probing only: "syntactic" | "semantic"
    label_base: int
    n_classes: int
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)
    is_pair: bool = False

    @property
    def labels(self) -> range:
        return range(self.label_base, self.label_base + self.n_classes)

    def split(self, name: str) -> list:
        return getattr(self, name if name != "val" else "validation")


@dataclass
class TaskSequence:
    tasks: list

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"duplicate task ids in sequence: {ids}")
        if not ids:
            raise ConfigurationError("task sequence is empty")

    def __len__(self):
        return len(self.tasks)

    @property
    def task_ids(self) -> list:
        return [t.task_id for t in self.tasks]


class LabelSpace:
    """Hands out globally disjoint integer label ranges."""

    def __init__(self):
        self._next = 0

    def allocate(self, n: int) -> int:
        base = self._next
        self._next += n
        return base


class Vocabulary:
    """Token string <-> id map with the four reserved control tokens."""

    def __init__(self, words):
        self.id_to_word = list(CONTROL_TOKENS) + list(words)
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        if len(self.word_to_id) != len(self.id_to_word):
            raise GenerationError("duplicate word forms in vocabulary")

    def __len__(self):
        return len(self.id_to_word)

    def word(self, token_id: int) -> str:
        return self.id_to_word[token_id]

    def id_of(self, word: str) -> int:
        return self.word_to_id.get(word, UNK_ID)

    def text(self, tokens) -> str:
        return " ".join(self.id_to_word[t] for t in tokens)


class GrammarVocabulary(Vocabulary):
    """Vocabulary partitioned into the grammar's disjoint role classes."""

    def __init__(self, spec: GrammarSpec):
        self.spec = spec
        words = []
        self.role_of = {}
        self.topic_cluster_of = {}
        self.partner_of = {}      # synonym/antonym pair partners
        self.verb_form_of = {}    # verb token -> (lexeme, form)
        self.verb_forms = []      # lexeme -> {"pres_sing","pres_plur","past"}

        def emit(word, role):
            token_id = len(CONTROL_TOKENS) + len(words)
            words.append(word)
            self.role_of[token_id] = role
            return token_id

        self.subj_sing = [emit(f"subjs{i}", "subj_sing") for i in range(spec.n_subjects)]
        self.subj_plur = [emit(f"subjp{i}", "subj_plur") for i in range(spec.n_subjects)]
        self.obj_sing = [emit(f"objs{i}", "obj_sing") for i in range(spec.n_objects)]
        self.obj_plur = [emit(f"objp{i}", "obj_plur") for i in range(spec.n_objects)]
        for i in range(spec.n_verbs):
            forms = {
                "pres_sing": emit(f"vprs{i}", "verb_pres_sing"),
                "pres_plur": emit(f"vprp{i}", "verb_pres_plur"),
                "past": emit(f"vpst{i}", "verb_past"),
            }
            self.verb_forms.append(forms)
            for form, tok in forms.items():
                self.verb_form_of[tok] = (i, form)
        self.adjectives = [emit(f"adj{i}", "adj") for i in range(spec.n_adjectives)]
        self.topics = []
        for c in range(spec.n_topics):
            cluster = [emit(f"top{c}_{j}", "topic") for j in range(spec.nouns_per_topic)]
            for tok in cluster:
                self.topic_cluster_of[tok] = c
            self.topics.append(cluster)
        self.sent_pos = [emit(f"good{i}", "sent_pos") for i in range(spec.n_sentiment)]
        self.sent_neg = [emit(f"bad{i}", "sent_neg") for i in range(spec.n_sentiment)]
        self.conjunctions = [emit(f"and{i}", "conj") for i in range(spec.n_conjunctions)]
        self.negations = [emit(f"not{i}", "neg") for i in range(spec.n_negations)]
        self.synonyms = []
        for i in range(spec.n_synonym_pairs):
            a = emit(f"syna{i}", "syn")
            b = emit(f"synb{i}", "syn")
            self.partner_of[a] = b
            self.partner_of[b] = a
            self.synonyms.extend((a, b))
        self.antonyms = []
        for i in range(spec.n_antonym_pairs):
            a = emit(f"anta{i}", "ant")
            b = emit(f"antb{i}", "ant")
            self.partner_of[a] = b
            self.partner_of[b] = a
            self.antonyms.extend((a, b))
        super().__init__(words)
        self.plain_mods = self.adjectives + self.synonyms + self.antonyms

    def role(self, token_id: int) -> str | None:
        return self.role_of.get(token_id)

    def verb_token(self, lexeme: int, tense: str, plural: bool) -> int:
        if tense == "past":
            return self.verb_forms[lexeme]["past"]
        return self.verb_forms[lexeme]["pres_plur" if plural else "pres_sing"]


# ---------------------------------------------------------------------------
# sentence construction and parsing
# ---------------------------------------------------------------------------


@dataclass
class ParsedGroup:
    verb: int
    obj: int
    topic: int | None
    neg: int | None


@dataclass
class ParsedClause:
    subject: int
    mods: list
    groups: list


@dataclass
class ParsedSentence:
    clauses: list
    conj: int | None

    @property
    def main(self) -> ParsedClause:
        return self.clauses[0]

    def depth(self) -> int:
        return len(self.main.groups)

    def main_verb(self) -> int:
        return self.main.groups[0].verb

    def main_obj(self) -> int:
        return self.main.groups[0].obj

    def topic_tokens(self) -> list:
        return [g.topic for c in self.clauses for g in c.groups if g.topic is not None]


def parse_sentence(tokens, vocab: GrammarVocabulary) -> ParsedSentence | None:
    """Parse into the unique derivation; None if the structure is violated."""
    clause_tokens = [[]]
    for tok in tokens:
        if vocab.role(tok) == "conj":
            clause_tokens.append([])
        else:
            clause_tokens[-1].append(tok)
    if len(clause_tokens) > 2:
        return None
    conj = None
    if len(clause_tokens) == 2:
        conj = next(t for t in tokens if vocab.role(t) == "conj")
    clauses = []
    for ct in clause_tokens:
        clause = _parse_clause(ct, vocab)
        if clause is None:
            return None
        clauses.append(clause)
    return ParsedSentence(clauses=clauses, conj=conj)


def _parse_clause(tokens, vocab: GrammarVocabulary) -> ParsedClause | None:
    i = 0
    n = len(tokens)
    if n == 0 or vocab.role(tokens[i]) not in SUBJ_ROLES:
        return None
    subject = tokens[i]
    i += 1
    mods = []
    while i < n and vocab.role(tokens[i]) in MOD_ROLES:
        mods.append(tokens[i])
        i += 1
    groups = []
    while i < n:
        neg = None
        if vocab.role(tokens[i]) == "neg":
            if groups:  # negation is licensed on the main predicate only
                return None
            neg = tokens[i]
            i += 1
        if i >= n or vocab.role(tokens[i]) not in VERB_ROLES:
            return None
        verb = tokens[i]
        i += 1
        if i >= n or vocab.role(tokens[i]) not in OBJ_ROLES:
            return None
        obj = tokens[i]
        i += 1
        topic = None
        if i < n and vocab.role(tokens[i]) == "topic":
            topic = tokens[i]
            i += 1
        groups.append(ParsedGroup(verb=verb, obj=obj, topic=topic, neg=neg))
    if not groups:
        return None
    return ParsedClause(subject=subject, mods=mods, groups=groups)


def _subject_plural_of_group(clause: ParsedClause, idx: int, vocab) -> bool:
    """Number of the noun a group's verb agrees with (chained relatives)."""
    if idx == 0:
        return vocab.role(clause.subject) == "subj_plur"
    return vocab.role(clause.groups[idx - 1].obj) == "obj_plur"


def agreement_ok(sentence: ParsedSentence, vocab: GrammarVocabulary) -> bool:
    for clause in sentence.clauses:
        for idx, g in enumerate(clause.groups):
            role = vocab.role(g.verb)
            if role == "verb_past":
                continue
            plural = _subject_plural_of_group(clause, idx, vocab)
            want = "verb_pres_plur" if plural else "verb_pres_sing"
            if role != want:
                return False
    return True


def narrative_order_ok(sentence: ParsedSentence, vocab: GrammarVocabulary) -> bool:
    """Coordinated sentences recount past first, present second."""
    if sentence.conj is None:
        return True
    first = vocab.role(sentence.clauses[0].groups[0].verb)
    second = vocab.role(sentence.clauses[1].groups[0].verb)
    return first == "verb_past" and second in ("verb_pres_sing", "verb_pres_plur")


def well_formed(tokens, vocab: GrammarVocabulary) -> bool:
    parsed = parse_sentence(tokens, vocab)
    return (parsed is not None and agreement_ok(parsed, vocab)
            and narrative_order_ok(parsed, vocab))


class SentenceSampler:
    """Draws well-formed sentences with whichever features a task pins down."""

    def __init__(self, vocab: GrammarVocabulary):
        self.vocab = vocab
        self.spec = vocab.spec

    def clause_tokens(self, rng, *, depth=None, main_tense=None, subj_plural=None,
                      obj_plural=None, topic_cluster="maybe", mods=None,
                      extra_mods=(), main_obj=None) -> list:
        """One clause. `topic_cluster` is "maybe" (random slot fill), None
        (never), or a cluster index (every slot filled from it)."""
        v = self.vocab
        if depth is None:
            depth = int(rng.choice(self.spec.d_max) + 1) if self.spec.d_max > 1 else 1
        if subj_plural is None:
            subj_plural = bool(rng.integers(2))
        subject = int(rng.choice(v.subj_plur if subj_plural else v.subj_sing))
        if mods is None:
            n_mods = int(rng.integers(0, self.spec.max_mods + 1))
            mods = [int(t) for t in rng.choice(v.plain_mods, size=n_mods)]
        mods = list(mods) + list(extra_mods)
        if len(mods) > 1:
            mods = [mods[i] for i in rng.permutation(len(mods))]
        out = [subject] + mods
        prev_plural = subj_plural
        for gi in range(depth):
            if gi == 0 and main_tense is not None:
                tense = main_tense
            else:
                tense = "past" if rng.integers(2) else "present"
            lexeme = int(rng.integers(self.spec.n_verbs))
            if gi == 0 and obj_plural is not None:
                this_obj_plural = obj_plural
            else:
                this_obj_plural = bool(rng.integers(2))
            if gi == 0 and main_obj is not None:
                obj = main_obj
                this_obj_plural = v.role(obj) == "obj_plur"
            else:
                obj = int(rng.choice(v.obj_plur if this_obj_plural else v.obj_sing))
            verb = v.verb_token(lexeme, "past" if tense == "past" else "present",
                                prev_plural)
            out.extend((verb, obj))
            if topic_cluster == "maybe":
                if rng.random() < self.spec.p_topic_slot:
                    cluster = int(rng.integers(self.spec.n_topics))
                    out.append(int(rng.choice(v.topics[cluster])))
            elif topic_cluster is not None:
                out.append(int(rng.choice(v.topics[topic_cluster])))
            prev_plural = this_obj_plural
        return out

    def coordination_tokens(self, rng, **clause_kw) -> list:
        first = self.clause_tokens(rng, main_tense="past", **clause_kw)
        second = self.clause_tokens(rng, main_tense="present", **clause_kw)
        conj = int(rng.choice(self.vocab.conjunctions))
        return first + [conj] + second

    def swap_adjacent(self, rng, tokens) -> tuple[list, int] | None:
        """Swap two adjacent distinct-role tokens so the result is no longer
        well formed. Returns (new tokens, position) or None."""
        v = self.vocab
        candidates = [i for i in range(len(tokens) - 1)
                      if v.role(tokens[i]) != v.role(tokens[i + 1])
                      and tokens[i] != tokens[i + 1]]
        if len(candidates) > 1:
            candidates = [candidates[i] for i in rng.permutation(len(candidates))]
        for i in candidates:
            swapped = list(tokens)
            swapped[i], swapped[i + 1] = swapped[i + 1], swapped[i]
            if not well_formed(swapped, v):
                return swapped, i
        return None

    def violate_agreement(self, rng, tokens) -> list | None:
        """Flip every present-tense verb to the wrong number form."""
        v = self.vocab
        spots = [i for i, t in enumerate(tokens)
                 if v.role(t) in ("verb_pres_sing", "verb_pres_plur")]
        if not spots:
            return None
        out = list(tokens)
        for i in spots:
            lexeme, form = v.verb_form_of[out[i]]
            out[i] = v.verb_forms[lexeme]["pres_plur" if form == "pres_sing"
                                          else "pres_sing"]
        return out


# ---------------------------------------------------------------------------
# task builders
# ---------------------------------------------------------------------------


class CorpusBuilder:
    """Builds every synthetic task over one shared vocabulary and label space.

    Label ranges for the full task roster are allocated up front, so the
    ids a task receives do not depend on which build calls happen first.
    """

    def __init__(self, grammar: GrammarSpec):
        self.grammar = grammar
        self.vocab = GrammarVocabulary(grammar)
        self.sampler = SentenceSampler(self.vocab)
        self.labels = LabelSpace()
        self.label_bases = {}
        for task_id, n in [
            ("topic", grammar.n_topics), ("sentiment", 2), ("entailment", 3),
            ("acceptability", 2), ("pair_paraphrase", 2), ("answer_match", 2),
            ("bshift", 2), ("tree_depth", grammar.d_max), ("subj_num", 2),
            ("obj_num", 2), ("tense", 2), ("paraphrase", 2), ("coord_inv", 2),
        ]:
            self.label_bases[task_id] = self.labels.allocate(n)

    # -- shared balanced-generation loop ------------------------------------

    def _build_task(self, task_id, kind, category, n_classes, sizes,
                    make_example, is_pair=False) -> TaskSpec:
        rng = rng_stream(self.grammar.seed, f"task:{task_id}")
        base = self.label_bases[task_id]
        task = TaskSpec(task_id=task_id, kind=kind, category=category,
                        label_base=base, n_classes=n_classes, is_pair=is_pair)
        seen = set()
        for split_name, size in (("train", sizes.train),
                                 ("validation", sizes.validation),
                                 ("test", sizes.test)):
            bucket = task.split(split_name)
            for cls in range(n_classes):
                quota = size // n_classes + (1 if cls < size % n_classes else 0)
                produced = 0
                attempts = 0
                while produced < quota:
                    attempts += 1
                    if attempts > 200 * quota + 1000:
                        raise GenerationError(
                            f"task {task_id!r} class {cls}: cannot draw {quota} "
                            f"unique examples"
                        )
                    ex = make_example(rng, cls)
                    if ex is None or ex.key() in seen:
                        continue
                    ex.label = base + cls
                    seen.add(ex.key())
                    bucket.append(ex)
                    produced += 1
        return task

    # -- continual tasks -----------------------------------------------------

    def topic_task(self, sizes: SplitSizes) -> TaskSpec:
        def make(rng, cls):
            tokens = self.sampler.clause_tokens(rng, topic_cluster=cls)
            return Example(tokens=tokens, label=0)

        return self._build_task("topic", "continual", None,
                                self.grammar.n_topics, sizes, make)

    def sentiment_task(self, sizes: SplitSizes) -> TaskSpec:
        v = self.vocab

        def make(rng, cls):
            majority = v.sent_pos if cls == 1 else v.sent_neg
            minority = v.sent_neg if cls == 1 else v.sent_pos
            n_major = int(rng.integers(1, 4))
            n_minor = int(rng.integers(0, n_major))
            marks = [int(t) for t in rng.choice(majority, size=n_major)]
            marks += [int(t) for t in rng.choice(minority, size=n_minor)]
            plain = [int(t) for t in rng.choice(v.adjectives, size=int(rng.integers(0, 2)))]
            tokens = self.sampler.clause_tokens(
                rng, depth=int(rng.integers(1, min(2, self.grammar.d_max) + 1)),
                mods=plain, extra_mods=marks)
            return Example(tokens=tokens, label=0)

        return self._build_task("sentiment", "continual", None, 2, sizes, make)

    def entailment_task(self, sizes: SplitSizes) -> TaskSpec:
        v = self.vocab
        sampler = self.sampler

        def make(rng, cls):
            if cls == 0:  # entail
                if rng.integers(2):
                    syn = int(rng.choice(v.synonyms))
                    premise = sampler.clause_tokens(rng, extra_mods=(syn,))
                    hypo = list(premise)
                    hypo[premise.index(syn)] = v.partner_of[syn]
                else:
                    premise = sampler.clause_tokens(
                        rng, depth=int(rng.integers(2, max(2, self.grammar.d_max) + 1)))
                    parsed = parse_sentence(premise, v)
                    hypo = [parsed.main.subject, parsed.main_verb(), parsed.main_obj()]
                    if hypo == premise:
                        return None
            elif cls == 1:  # contradict
                if rng.integers(2):
                    ant = int(rng.choice(v.antonyms))
                    premise = sampler.clause_tokens(rng, extra_mods=(ant,))
                    hypo = list(premise)
                    hypo[premise.index(ant)] = v.partner_of[ant]
                else:
                    premise = sampler.clause_tokens(rng)
                    parsed = parse_sentence(premise, v)
                    verb_pos = premise.index(parsed.main_verb())
                    hypo = premise[:verb_pos] + [int(rng.choice(v.negations))] + premise[verb_pos:]
            else:  # neutral
                premise = sampler.clause_tokens(rng)
                hypo = sampler.clause_tokens(rng)
                if pair_relation(premise, hypo, v) != "neutral":
                    return None
            return Example(tokens=premise, label=0, second_segment=hypo)

        return self._build_task("entailment", "continual", None, 3, sizes, make,
                                is_pair=True)

    def acceptability_task(self, sizes: SplitSizes) -> TaskSpec:
        # single-group clauses with at most one modifier: a tight intact
        # manifold keeps the judgment about grammar, not construction rarity
        sampler = self.sampler

        def sentence(rng, force_present=False):
            kw = {"main_tense": "present"} if force_present else {}
            n_mods = int(rng.integers(0, 2))
            mods = [int(t) for t in rng.choice(self.vocab.plain_mods, size=n_mods)]
            return sampler.clause_tokens(rng, depth=1, topic_cluster=None,
                                         mods=mods, **kw)

        def make(rng, cls):
            if cls == 0:  # intact
                return Example(tokens=sentence(rng), label=0)
            if rng.integers(2):
                source = sentence(rng, force_present=True)
                corrupted = sampler.violate_agreement(rng, source)
            else:
                source = sentence(rng)
                swap = sampler.swap_adjacent(rng, source)
                corrupted = swap[0] if swap else None
            if corrupted is None:
                return None
            return Example(tokens=corrupted, label=0, meta={"source": source})

        return self._build_task("acceptability", "continual", None, 2, sizes, make)

    def pair_paraphrase_task(self, sizes: SplitSizes, task_id="pair_paraphrase") -> TaskSpec:
        v = self.vocab
        sampler = self.sampler

        def make(rng, cls):
            syn_a, syn_b = (int(t) for t in rng.choice(v.synonyms, size=2, replace=False))
            first = sampler.clause_tokens(rng, extra_mods=(syn_a, syn_b))
            if cls == 1:
                second = list(first)
                for syn in ([syn_a, syn_b] if rng.integers(2) else [syn_a]):
                    second[first.index(syn)] = v.partner_of[syn]
            else:
                second = sampler.clause_tokens(rng)
                if _is_synonym_rewrite(first, second, v):
                    return None
            return Example(tokens=first, label=0, second_segment=second)

        return self._build_task(task_id, "continual", None, 2, sizes, make,
                                is_pair=True)

    def answer_match_task(self, sizes: SplitSizes) -> TaskSpec:
        v = self.vocab
        sampler = self.sampler

        def make(rng, cls):
            first = sampler.clause_tokens(rng, depth=1)
            asked = parse_sentence(first, v).main_obj()
            if cls == 1:
                second = sampler.clause_tokens(rng, depth=1, main_obj=asked)
            else:
                second = sampler.clause_tokens(rng, depth=1)
                if parse_sentence(second, v).main_obj() == asked:
                    return None
            return Example(tokens=first, label=0, second_segment=second)

        return self._build_task("answer_match", "continual", None, 2, sizes, make,
                                is_pair=True)

    # -- probing tasks -------------------------------------------------------

    def bshift_task(self, sizes: SplitSizes) -> TaskSpec:
        sampler = self.sampler

        def make(rng, cls):
            source = sampler.clause_tokens(rng)
            if cls == 0:
                return Example(tokens=source, label=0)
            swap = sampler.swap_adjacent(rng, source)
            if swap is None:
                return None
            return Example(tokens=swap[0], label=0,
                           meta={"source": source, "swap_pos": swap[1]})

        return self._build_task("bshift", "probing", "syntactic", 2, sizes, make)

    def tree_depth_task(self, sizes: SplitSizes) -> TaskSpec:
        if self.grammar.d_max < 2:
            raise ConfigurationError(
                "tree-depth probing needs d_max >= 2; the depth task is "
                "degenerate with a single class"
            )

        def make(rng, cls):
            return Example(tokens=self.sampler.clause_tokens(rng, depth=cls + 1),
                           label=0)

        return self._build_task("tree_depth", "probing", "syntactic",
                                self.grammar.d_max, sizes, make)

    def subj_num_task(self, sizes: SplitSizes) -> TaskSpec:
        def make(rng, cls):
            return Example(tokens=self.sampler.clause_tokens(rng, subj_plural=bool(cls)),
                           label=0)

        return self._build_task("subj_num", "probing", "syntactic", 2, sizes, make)

    def obj_num_task(self, sizes: SplitSizes) -> TaskSpec:
        def make(rng, cls):
            return Example(tokens=self.sampler.clause_tokens(rng, obj_plural=bool(cls)),
                           label=0)

        return self._build_task("obj_num", "probing", "syntactic", 2, sizes, make)

    def tense_task(self, sizes: SplitSizes) -> TaskSpec:
        def make(rng, cls):
            tense = "present" if cls == 0 else "past"
            return Example(tokens=self.sampler.clause_tokens(rng, main_tense=tense),
                           label=0)

        return self._build_task("tense", "probing", "semantic", 2, sizes, make)

    def paraphrase_task(self, sizes: SplitSizes) -> TaskSpec:
        v = self.vocab
        sampler = self.sampler

        def make(rng, cls):
            syn = int(rng.choice(v.synonyms))
            first = sampler.clause_tokens(rng, extra_mods=(syn,))
            if cls == 1:
                second = list(first)
                second[first.index(syn)] = v.partner_of[syn]
            else:
                second = sampler.clause_tokens(rng)
                if _is_synonym_rewrite(first, second, v):
                    return None
            return Example(tokens=first, label=0, second_segment=second)

        return self._build_task("paraphrase", "probing", "semantic", 2, sizes, make,
                                is_pair=True)

    def coord_inv_task(self, sizes: SplitSizes) -> TaskSpec:
        v = self.vocab

        def make(rng, cls):
            natural = self.sampler.coordination_tokens(rng)
            if cls == 0:
                return Example(tokens=natural, label=0)
            conj_pos = next(i for i, t in enumerate(natural) if v.role(t) == "conj")
            inverted = (natural[conj_pos + 1:] + [natural[conj_pos]]
                        + natural[:conj_pos])
            return Example(tokens=inverted, label=0, meta={"source": natural})

        return self._build_task("coord_inv", "probing", "semantic", 2, sizes, make)


def _is_synonym_rewrite(first, second, vocab) -> bool:
    """True when `second` is `first` with >=1 synonym-pair swaps only."""
    if len(first) != len(second) or first == second:
        return False
    for a, b in zip(first, second):
        if a == b:
            continue
        if vocab.role(a) == "syn" and vocab.partner_of.get(a) == b:
            continue
        return False
    return True


def pair_relation(premise, hypothesis, vocab: GrammarVocabulary) -> str:
    """Re-derive the entailment label for a sentence pair, by rule."""
    if len(premise) == len(hypothesis):
        swaps = [(a, b) for a, b in zip(premise, hypothesis) if a != b]
        if len(swaps) == 1:
            a, b = swaps[0]
            if vocab.partner_of.get(a) == b:
                if vocab.role(a) == "syn":
                    return "entail"
                if vocab.role(a) == "ant":
                    return "contradict"
    if len(hypothesis) == len(premise) + 1:
        inserted = [i for i in range(len(hypothesis))
                    if hypothesis[:i] + hypothesis[i + 1:] == premise]
        for i in inserted:
            if vocab.role(hypothesis[i]) == "neg":
                return "contradict"
    parsed = parse_sentence(premise, vocab)
    if parsed is not None and len(hypothesis) == 3:
        extraction = [parsed.main.subject, parsed.main_verb(), parsed.main_obj()]
        if hypothesis == extraction and premise != extraction:
            return "entail"
    return "neutral"


def rederive_label(task: TaskSpec, example: Example, vocab: GrammarVocabulary) -> int:
    """Recompute an example's label from its tokens alone (oracle)."""
    t = task.task_id
    base = task.label_base
    tokens = example.tokens
    if t == "topic":
        clusters = {vocab.topic_cluster_of[tok] for tok in tokens
                    if vocab.role(tok) == "topic"}
        if len(clusters) != 1:
            raise GenerationError(f"topic sentence with clusters {clusters}")
        return base + clusters.pop()
    if t == "sentiment":
        pos = sum(1 for tok in tokens if vocab.role(tok) == "sent_pos")
        neg = sum(1 for tok in tokens if vocab.role(tok) == "sent_neg")
        if pos == neg:
            raise GenerationError("sentiment sentence without a majority")
        return base + (1 if pos > neg else 0)
    if t == "entailment":
        rel = pair_relation(tokens, example.second_segment, vocab)
        return base + {"entail": 0, "contradict": 1, "neutral": 2}[rel]
    if t in ("acceptability", "bshift"):
        return base + (0 if well_formed(tokens, vocab) else 1)
    parsed = parse_sentence(tokens, vocab)
    if t == "tree_depth":
        return base + parsed.depth() - 1
    if t == "subj_num":
        return base + (1 if vocab.role(parsed.main.subject) == "subj_plur" else 0)
    if t == "obj_num":
        return base + (1 if vocab.role(parsed.main_obj()) == "obj_plur" else 0)
    if t == "tense":
        return base + (1 if vocab.role(parsed.main_verb()) == "verb_past" else 0)
    if t in ("paraphrase", "pair_paraphrase"):
        return base + (1 if _is_synonym_rewrite(tokens, example.second_segment, vocab) else 0)
    if t == "answer_match":
        second = parse_sentence(example.second_segment, vocab)
        return base + (1 if second.main_obj() == parsed.main_obj() else 0)
    if t == "coord_inv":
        if parsed.conj is None:
            raise GenerationError("coord_inv sentence without coordination")
        first = vocab.role(parsed.clauses[0].groups[0].verb)
        return base + (0 if first == "verb_past" else 1)
    raise ConfigurationError(f"unknown task id {t!r}")


# ---------------------------------------------------------------------------
# public build operations
# ---------------------------------------------------------------------------


def build_continual_tasks(corpus: CorpusBuilder, sizes: SplitSizes | None = None) -> list:
    """The four core classification tasks with disjoint label ranges."""
    sizes = sizes or SplitSizes()
    return [
        corpus.topic_task(sizes),
        corpus.sentiment_task(sizes),
        corpus.entailment_task(sizes),
        corpus.acceptability_task(sizes),
    ]


def build_extra_pair_tasks(corpus: CorpusBuilder, sizes: SplitSizes | None = None) -> list:
    """Two more pair tasks so six-task sequence presets have six tasks."""
    sizes = sizes or SplitSizes()
    return [corpus.pair_paraphrase_task(sizes), corpus.answer_match_task(sizes)]


def build_probing_tasks(corpus: CorpusBuilder, samples_per_class: int = 300) -> list:
    """The seven probing tasks; `samples_per_class` sizes the train split."""
    if samples_per_class < 2:
        raise ConfigurationError("samples_per_class must be at least 2")
    held = max(2, samples_per_class // 4)
    builders = {
        "bshift": corpus.bshift_task, "tree_depth": corpus.tree_depth_task,
        "subj_num": corpus.subj_num_task, "obj_num": corpus.obj_num_task,
        "tense": corpus.tense_task, "paraphrase": corpus.paraphrase_task,
        "coord_inv": corpus.coord_inv_task,
    }
    out = []
    for task_id in PROBING_TASKS:
        n_classes = corpus.grammar.d_max if task_id == "tree_depth" else 2
        sizes = SplitSizes(train=samples_per_class * n_classes,
                           validation=held * n_classes, test=held * n_classes)
        out.append(builders[task_id](sizes))
    return out


def order_sequence(tasks, order) -> TaskSequence:
    """Arrange built tasks into a named preset or an explicit id list."""
    by_id = {t.task_id: t for t in tasks}
    if isinstance(order, str):
        if order not in ORDER_PRESETS:
            raise ConfigurationError(
                f"unknown order preset {order!r}; have {sorted(ORDER_PRESETS)}"
            )
        order = ORDER_PRESETS[order]
    if len(set(order)) != len(order):
        raise ConfigurationError(f"duplicate task in order: {order}")
    if len(order) < 2:
        raise ConfigurationError("a task sequence needs at least 2 tasks")
    missing = [name for name in order if name not in by_id]
    if missing:
        raise ConfigurationError(f"unknown task name(s) in order: {missing}")
    return TaskSequence(tasks=[by_id[name] for name in order])


def to_model_tokens(example: Example, max_len: int) -> list:
    """Assemble the encoder input: [CLS] tokens ([SEP] second)? , truncated."""
    out = [CLS_ID] + list(example.tokens)
    if example.second_segment is not None:
        out.append(SEP_ID)
        out.extend(example.second_segment)
    return out[:max_len]


# ---------------------------------------------------------------------------
# ingestion and export of line-delimited datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IngestSchema:
    text_field: str = "text"
    pair_field: str = "text_pair"
    label_field: str = "label"
    train_file: str = "train.jsonl"
    validation_file: str = "validation.jsonl"
    test_file: str = "test.jsonl"


def _read_records(path, schema: IngestSchema):
    allowed = {schema.text_field, schema.pair_field, schema.label_field}
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestionError(f"invalid JSON record: {e}", line=lineno)
            if not isinstance(obj, dict):
                raise IngestionError("record is not an object", line=lineno)
            unknown = set(obj) - allowed
            if unknown:
                raise IngestionError(f"unknown field {sorted(unknown)[0]!r}",
                                     line=lineno)
            for key in (schema.text_field, schema.label_field):
                if key not in obj:
                    raise IngestionError(f"missing field {key!r}", line=lineno)
            text = str(obj[schema.text_field]).strip().lower()
            if not text:
                raise IngestionError("empty text", line=lineno)
            pair = obj.get(schema.pair_field)
            pair = str(pair).strip().lower() if pair is not None else None
            if pair == "":
                raise IngestionError("empty text_pair", line=lineno)
            records.append((lineno, text, pair, str(obj[schema.label_field])))
    return records


def ingest_dataset(path, task_id="ingested", schema: IngestSchema | None = None,
                   label_space: LabelSpace | None = None):
    """Read train/validation/test JSONL files from a directory.

    Whitespace tokenization over lowercased text; the vocabulary is
    frozen on the training split and out-of-vocabulary words map to
    <unk>. Returns (TaskSpec, Vocabulary).
    """
    import os

    schema = schema or IngestSchema()
    label_space = label_space or LabelSpace()
    splits = {}
    for split, fname in (("train", schema.train_file),
                         ("validation", schema.validation_file),
                         ("test", schema.test_file)):
        fpath = os.path.join(path, fname)
        if not os.path.exists(fpath):
            raise IngestionError(f"missing split file {fname!r} under {path!r}")
        splits[split] = _read_records(fpath, schema)

    words = []
    word_set = set()
    for _, text, pair, _ in splits["train"]:
        for token in text.split() + (pair.split() if pair else []):
            if token not in word_set:
                word_set.add(token)
                words.append(token)
    vocab = Vocabulary(words)

    train_labels = sorted({label for _, _, _, label in splits["train"]})
    base = label_space.allocate(len(train_labels))
    label_map = {lab: base + i for i, lab in enumerate(train_labels)}

    is_pair = any(pair is not None for _, _, pair, _ in splits["train"])
    task = TaskSpec(task_id=task_id, kind="continual", category=None,
                    label_base=base, n_classes=len(train_labels), is_pair=is_pair)
    for split in ("train", "validation", "test"):
        bucket = task.split(split)
        for lineno, text, pair, label in splits[split]:
            if label not in label_map:
                raise IngestionError(
                    f"label {label!r} in {split} split never seen in training",
                    line=lineno)
            tokens = [vocab.id_of(w) for w in text.split()]
            second = [vocab.id_of(w) for w in pair.split()] if pair else None
            bucket.append(Example(tokens=tokens, label=label_map[label],
                                  second_segment=second))
    return task, vocab


def export_task(task: TaskSpec, vocab: Vocabulary, out_dir) -> None:
    """Write a task back out in the ingestion format."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    for split, fname in (("train", "train.jsonl"), ("validation", "validation.jsonl"),
                         ("test", "test.jsonl")):
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8") as f:
            for ex in task.split(split):
                record = {"text": vocab.text(ex.tokens), "label": str(ex.label)}
                if ex.second_segment is not None:
                    record["text_pair"] = vocab.text(ex.second_segment)
                f.write(json.dumps(record, sort_keys=True) + "\n")
