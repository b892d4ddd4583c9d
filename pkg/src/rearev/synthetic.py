"""Deterministic movie-domain KGs and templated questions with oracle answers."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import QuestionInstance, write_jsonl
from .encoder import Vocab
from .kg import KnowledgeGraph, coverage, extract_many, write_facts, write_subgraphs

DIRECTED, WRITTEN, STARRED, YEAR, GENRE = "directed_by", "written_by", "starred_actors", "release_year", "has_genre"
SCHEMA = (DIRECTED, WRITTEN, STARRED, YEAR, GENRE)
BORN = "born_in"  # optional person attribute, present when GenConfig.cities > 0
ALIASES = {DIRECTED: "has_executive", WRITTEN: "plot_by", STARRED: "has_cast", YEAR: "air_on"}
MAX_ANSWERS = 20

_TITLE_WORDS = (
    "silent river night city last stone broken dream glass empire winter garden red shadow iron "
    "golden lost secret hidden wild dark blue falling burning distant northern quiet electric paper "
    "crimson hollow velvet savage lonely final endless frozen midnight summer storm ghost king road "
    "ocean mirror fire island desert machine heart star moon valley tower bridge harbor circus"
).split()
_FIRST = (
    "anna ben carla david elena frank grace henry iris jack kate leo maria nico olga paul quinn "
    "rosa sam tara umar vera will xena yuri zoe alma boris cleo dario edith felix gina hugo ines "
    "jonas kira luis mona nils oscar pia rami sofia theo una vito wanda"
).split()
_LAST = (
    "adler brandt castro dumont ellis fischer garcia hale ito jensen kowalski lund moreau novak "
    "okafor petrov quist rossi silva tanaka ueda varga weber xu yilmaz zamora abbott baker chen "
    "duval evans frost gray holm iqbal jovanovic keller lopez meyer nash ortiz park reyes stone "
    "torres ulrich vance wolfe young"
).split()
_GENRES = ("drama comedy thriller horror romance action documentary animation western "
           "crime fantasy mystery").split()


class TemplateExhaustedError(RuntimeError):
    pass


@dataclass
class GenConfig:
    movies: int = 500
    directors: int = 250
    actors: int = 600
    writers: int = 300
    years: int = 50
    first_year: int = 1970
    genres: int = 12
    cities: int = 0  # birthplaces for people; 0 keeps the KG movie-only
    questions: int = 5000
    templates: tuple[str, ...] | None = None  # None = every template
    alias_prob: float = 0.0
    seed: int = 0


# logical forms --------------------------------------------------------------

@dataclass
class Chain:
    seeds: list[str]
    steps: list[tuple[str, bool]]  # (relation, inverse?)

    def to_json(self) -> dict:
        return {"seeds": list(self.seeds), "steps": [[r, "inv" if inv else "fwd"] for r, inv in self.steps]}


@dataclass
class LogicalForm:
    """A relation chain, or the intersection of exactly two chains."""

    branches: list[Chain]

    def __post_init__(self):
        if len(self.branches) not in (1, 2):
            raise ValueError("a logical form has one chain or a two-branch conjunction")
        if any(len(c.steps) > 3 for c in self.branches):
            raise ValueError("relation programs are limited to 3 steps")

    @property
    def kind(self) -> str:
        return "and" if len(self.branches) == 2 else "chain"

    @property
    def seeds(self) -> list[str]:
        return [s for c in self.branches for s in c.seeds]

    def to_json(self) -> dict:
        return {"type": self.kind, "branches": [c.to_json() for c in self.branches]}

    @classmethod
    def from_json(cls, data: dict) -> "LogicalForm":
        return cls([
            Chain(list(b["seeds"]), [(r, d == "inv") for r, d in b["steps"]]) for b in data["branches"]
        ])


class RelationIndex:
    """Forward and inverse adjacency sets keyed by relation name."""

    def __init__(self, kg: KnowledgeGraph, alias_map: dict[str, str] | None = None):
        back = {alias: canon for canon, alias in (alias_map or {}).items()}
        self.fwd: dict[tuple[str, int], set[int]] = {}
        self.inv: dict[tuple[str, int], set[int]] = {}
        for s, r, o in kg.facts.tolist():
            name = kg.relations[r]
            name = back.get(name, name)
            self.fwd.setdefault((name, s), set()).add(o)
            self.inv.setdefault((name, o), set()).add(s)

    def image(self, nodes: Iterable[int], relation: str, inverse: bool) -> set[int]:
        table = self.inv if inverse else self.fwd
        out: set[int] = set()
        for v in nodes:
            out |= table.get((relation, v), set())
        return out


def oracle_answer(kg: KnowledgeGraph, lf: LogicalForm, alias_map: dict[str, str] | None = None,
                  index: RelationIndex | None = None) -> set[int]:
    """Set-valued traversal of the logical form; answers are global entity ids.

    ``alias_map`` (canonical -> alias relation name) makes a step on a canonical
    relation also follow facts stored under its alias.
    """
    index = index or RelationIndex(kg, alias_map)
    result = None
    for chain in lf.branches:
        frontier = {kg.entity_index[s] for s in chain.seeds if s in kg.entity_index}
        for rel, inverse in chain.steps:
            frontier = index.image(frontier, rel, inverse)
        result = frontier if result is None else result & frontier
    return result or set()


# knowledge graph --------------------------------------------------------------

def _unique_names(rng: np.random.Generator, n: int, make) -> list[str]:
    names: list[str] = []
    seen: set[str] = set()
    while len(names) < n:
        name = make(rng)
        if name in seen:
            name = f"{name} {len(names)}"
        seen.add(name)
        names.append(name)
    return names


def _title(rng):
    k = rng.integers(2, 4)
    return " ".join(rng.choice(_TITLE_WORDS, size=k, replace=False))


def _person(rng):
    return f"{rng.choice(_FIRST)} {rng.choice(_LAST)}"


@dataclass
class MovieWorld:
    kg: KnowledgeGraph
    movies: list[str]
    directors: list[str]
    actors: list[str]
    writers: list[str]
    years: list[str]
    genres: list[str]
    config: GenConfig = field(default_factory=GenConfig)
    cities: list[str] = field(default_factory=list)


def generate_kg(config: GenConfig) -> MovieWorld:
    """Typed random movie KG.

    Each movie gets exactly one release year and one genre, 1-2 directors,
    2-5 actors and 1-3 writers, so a movie contributes 6 to 12 facts.  With
    ``config.cities > 0`` every person credited on a movie also gets one
    birthplace.
    """
    rng = np.random.default_rng(config.seed)
    movies = _unique_names(rng, config.movies, _title)
    people = _unique_names(rng, config.directors + config.actors + config.writers, _person)
    directors = people[: config.directors]
    actors = people[config.directors: config.directors + config.actors]
    writers = people[config.directors + config.actors:]
    years = [str(config.first_year + i) for i in range(config.years)]
    genres = [_GENRES[i % len(_GENRES)] + ("" if i < len(_GENRES) else f" {i}") for i in range(config.genres)]

    triples = []
    for movie in movies:
        triples.append((movie, YEAR, years[rng.integers(len(years))]))
        triples.append((movie, GENRE, genres[rng.integers(len(genres))]))
        for who in rng.choice(directors, size=rng.integers(1, 3), replace=False):
            triples.append((movie, DIRECTED, str(who)))
        for who in rng.choice(actors, size=rng.integers(2, 6), replace=False):
            triples.append((movie, STARRED, str(who)))
        for who in rng.choice(writers, size=rng.integers(1, 4), replace=False):
            triples.append((movie, WRITTEN, str(who)))
    cities = [f"city {i}" for i in range(config.cities)]
    if cities:
        credited = {o for _, r, o in triples if r in (DIRECTED, STARRED, WRITTEN)}
        for who in people:
            if who in credited:
                triples.append((who, BORN, cities[rng.integers(len(cities))]))
    kg = KnowledgeGraph.from_triples(triples)
    return MovieWorld(kg, movies, directors, actors, writers, years, genres, config, cities)


def alias_relations(kg: KnowledgeGraph, prob: float, seed: int,
                    alias_map: dict[str, str] = ALIASES) -> KnowledgeGraph:
    """Rename each fact's relation to its alias with probability ``prob``."""
    if prob <= 0:
        return kg
    rng = np.random.default_rng(seed)
    triples = []
    for s, r, o in kg.triples():
        if r in alias_map and rng.random() < prob:
            r = alias_map[r]
        triples.append((s, r, o))
    return KnowledgeGraph.from_triples(triples)


# templates ----------------------------------------------------------------------

@dataclass(frozen=True)
class Template:
    name: str
    text: str  # one "{}" per seed slot, in branch order
    branches: tuple[tuple[str, tuple[tuple[str, bool], ...]], ...]  # (seed pool, steps) per branch
    hops: int
    order_sensitive: bool = False

    @property
    def relations(self) -> set[str]:
        return {r for _, steps in self.branches for r, _ in steps}


F, I = False, True
TEMPLATES: dict[str, Template] = {t.name: t for t in [
    # one hop
    Template("movie_director", "who directed [{}]", (("movies", ((DIRECTED, F),)),), 1),
    Template("movie_writer", "who wrote [{}]", (("movies", ((WRITTEN, F),)),), 1),
    Template("movie_actor", "who acted in [{}]", (("movies", ((STARRED, F),)),), 1),
    Template("movie_year", "when was [{}] released", (("movies", ((YEAR, F),)),), 1),
    Template("movie_genre", "what genre is [{}]", (("movies", ((GENRE, F),)),), 1),
    Template("director_movies", "which movies were directed by [{}]", (("directors", ((DIRECTED, I),)),), 1),
    Template("writer_movies", "which movies did [{}] write", (("writers", ((WRITTEN, I),)),), 1),
    Template("actor_movies", "which movies did [{}] act in", (("actors", ((STARRED, I),)),), 1),
    # two hops; the *_of_* pairs traverse the same relations in opposite orders
    Template("director_movie_years", "when were the movies directed by [{}] released",
             (("directors", ((DIRECTED, I), (YEAR, F))),), 2, True),
    Template("year_movie_directors", "who directed the movies released in [{}]",
             (("years", ((YEAR, I), (DIRECTED, F))),), 2, True),
    Template("director_movie_actors", "who acted in the movies directed by [{}]",
             (("directors", ((DIRECTED, I), (STARRED, F))),), 2, True),
    Template("actor_movie_directors", "who directed the movies starring [{}]",
             (("actors", ((STARRED, I), (DIRECTED, F))),), 2, True),
    Template("writer_movie_genres", "what genres are the movies written by [{}]",
             (("writers", ((WRITTEN, I), (GENRE, F))),), 2),
    Template("writer_movie_directors", "who directed the movies written by [{}]",
             (("writers", ((WRITTEN, I), (DIRECTED, F))),), 2, True),
    Template("director_movie_writers", "who wrote the movies directed by [{}]",
             (("directors", ((DIRECTED, I), (WRITTEN, F))),), 2, True),
    # three hops
    Template("movie_codirected_writers", "who wrote the movies that share directors with [{}]",
             (("movies", ((DIRECTED, F), (DIRECTED, I), (WRITTEN, F))),), 3),
    Template("movie_cowritten_years", "when were the movies released whose writers also wrote [{}]",
             (("movies", ((WRITTEN, F), (WRITTEN, I), (YEAR, F))),), 3),
    Template("movie_coacted_directors", "who directed the movies that share actors with [{}]",
             (("movies", ((STARRED, F), (STARRED, I), (DIRECTED, F))),), 3),
    Template("movie_codirected_genres", "what genres are the movies whose directors also directed [{}]",
             (("movies", ((DIRECTED, F), (DIRECTED, I), (GENRE, F))),), 3),
    Template("movie_cowritten_actors", "who acted in the movies whose writers also wrote [{}]",
             (("movies", ((WRITTEN, F), (WRITTEN, I), (STARRED, F))),), 3),
    # three hops with no shorter route to any answer type: the seed's own birthplace is a decoy
    Template("director_actor_birthplaces", "where were the actors born who starred in movies directed by [{}]",
             (("directors", ((DIRECTED, I), (STARRED, F), (BORN, F))),), 3),
    Template("writer_director_birthplaces", "where were the directors born of the movies written by [{}]",
             (("writers", ((WRITTEN, I), (DIRECTED, F), (BORN, F))),), 3),
    Template("actor_writer_birthplaces", "where were the writers born of the movies starring [{}]",
             (("actors", ((STARRED, I), (WRITTEN, F), (BORN, F))),), 3),
    # conjunctions
    Template("and_director_actor", "which movies were directed by [{}] and starred [{}]",
             (("directors", ((DIRECTED, I),)), ("actors", ((STARRED, I),))), 1),
    Template("and_actor_year", "which movies starring [{}] were released in [{}]",
             (("actors", ((STARRED, I),)), ("years", ((YEAR, I),))), 1),
    Template("and_writer_director", "which movies written by [{}] were directed by [{}]",
             (("writers", ((WRITTEN, I),)), ("directors", ((DIRECTED, I),))), 1),
]}

TEMPLATE_GROUPS = {
    "all": tuple(TEMPLATES),
    "one_hop": tuple(n for n, t in TEMPLATES.items() if t.hops == 1 and len(t.branches) == 1),
    "two_hop": tuple(n for n, t in TEMPLATES.items() if t.hops == 2),
    "three_hop": tuple(n for n, t in TEMPLATES.items() if t.hops == 3),
    "three_hop_strict": tuple(n for n, t in TEMPLATES.items() if t.hops == 3 and BORN in t.relations),
    "conjunction": tuple(n for n, t in TEMPLATES.items() if len(t.branches) == 2),
    "order_sensitive": tuple(n for n, t in TEMPLATES.items() if t.order_sensitive),
}
TEMPLATE_GROUPS["order_and_conjunction"] = TEMPLATE_GROUPS["order_sensitive"] + TEMPLATE_GROUPS["conjunction"]


def resolve_templates(names: str | Sequence[str] | None, relations: Iterable[str] | None = None) -> list[str]:
    """Expand group names (a single name may be passed bare).

    With ``relations``, group members needing a missing relation are dropped.
    """
    if isinstance(names, str):
        names = [names]
    available = None if relations is None else set(relations)

    def usable(n):
        return available is None or TEMPLATES[n].relations <= available

    if not names:
        return [n for n in TEMPLATES if usable(n)]
    out: list[str] = []
    for name in names:
        if name in TEMPLATE_GROUPS:
            out.extend(n for n in TEMPLATE_GROUPS[name] if usable(n))
        elif name in TEMPLATES:
            out.append(name)
        else:
            raise KeyError(f"unknown template or group {name!r}")
    return list(dict.fromkeys(out))


@dataclass
class GeneratedQuestion:
    text: str
    lf: LogicalForm
    template: str
    answers: list[str]


def instantiate_question(world: MovieWorld, template: Template | str, rng: np.random.Generator,
                         index: RelationIndex | None = None, attempts: int = 100) -> GeneratedQuestion:
    """Fill ``template`` with random seeds until it has between 1 and 20 answers."""
    if isinstance(template, str):
        template = TEMPLATES[template]
    kg = world.kg
    index = index or RelationIndex(kg)
    pools = {"movies": world.movies, "directors": world.directors, "actors": world.actors,
             "writers": world.writers, "years": world.years, "genres": world.genres, "cities": world.cities}
    for _ in range(attempts):
        if len(template.branches) == 2:
            seeds = _conjunction_seeds(world, template, rng, index)
            if seeds is None:
                continue
        else:
            seeds = [str(rng.choice(pools[template.branches[0][0]]))]
        lf = LogicalForm([Chain([s], list(steps)) for s, (_, steps) in zip(seeds, template.branches)])
        answers = oracle_answer(kg, lf, index=index)
        if 1 <= len(answers) <= MAX_ANSWERS:
            names = sorted(kg.entities[a] for a in answers)
            return GeneratedQuestion(template.text.format(*seeds), lf, template.name, names)
    raise TemplateExhaustedError(f"template {template.name!r} unsatisfiable after {attempts} draws")


def _conjunction_seeds(world, template, rng, index):
    # draw a movie and pick one seed per branch among its neighbours so the intersection is nonempty
    movie = world.kg.entity_index[str(rng.choice(world.movies))]
    seeds = []
    for _, steps in template.branches:
        rel, _inv = steps[0]
        cands = sorted(index.image([movie], rel, False))
        if not cands:
            return None
        seeds.append(world.kg.entities[cands[rng.integers(len(cands))]])
    return seeds


def generate_questions(world: MovieWorld, n: int, templates: Sequence[str] | None = None,
                       seed: int = 0) -> list[GeneratedQuestion]:
    """``n`` questions cycling through the templates in a seeded random order, no duplicates."""
    rng = np.random.default_rng(seed)
    names = resolve_templates(templates, world.kg.relations)
    if not names:
        raise TemplateExhaustedError("no requested template is answerable on this KG")
    index = RelationIndex(world.kg)
    out, seen = [], set()
    misses = 0
    while len(out) < n:
        name = names[len(out) % len(names)] if misses == 0 else str(rng.choice(names))
        q = instantiate_question(world, name, rng, index)
        if q.text in seen:
            misses += 1
            if misses > 50 * n:
                raise TemplateExhaustedError("cannot draw enough distinct questions")
            continue
        misses = 0
        seen.add(q.text)
        out.append(q)
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    counts = [int(math.floor(r * n + 1e-9)) for r in ratios]
    counts[0] += n - sum(counts)
    return counts


def question_records(questions: Sequence[GeneratedQuestion], prefix: str = "q") -> list[dict]:
    return [
        {"qid": f"{prefix}{i:06d}", "text": q.text, "seeds": q.lf.seeds, "answers": q.answers,
         "lf": q.lf.to_json(), "template": q.template}
        for i, q in enumerate(questions)
    ]


def emit_dataset(kg: KnowledgeGraph, questions: Sequence[GeneratedQuestion], out_dir: str | Path,
                 ratios: Sequence[float] = (0.8, 0.1, 0.1), m: int = 500, alpha: float = 0.15,
                 iters: int = 30, meta: dict | None = None) -> dict:
    """Write facts, vocabulary, splits, subgraph cache and coverage report.

    ``kg`` is the (possibly incomplete) graph the reasoner sees; answers were
    fixed by the oracle beforehand.  Returns the coverage report.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = question_records(questions)
    counts = split_counts(len(records), ratios)
    bounds = np.cumsum([0] + counts)
    splits = {name: records[bounds[i]:bounds[i + 1]] for i, name in enumerate(("train", "dev", "test"))}

    write_facts(kg, out / "facts.tsv")
    Vocab.build(r["text"] for r in splits["train"]).save(out / "vocab.txt")
    for name, recs in splits.items():
        write_jsonl(out / f"{name}.jsonl", recs)

    for r in records:
        missing = [s for s in r["seeds"] if s not in kg.entity_index]
        if missing:
            raise KeyError(f"seed entities {missing} absent from the KG")
    subs = extract_many(kg, [r["seeds"] for r in records], m, alpha, iters)
    write_subgraphs(out / "subgraphs.jsonl", ((r["qid"], s) for r, s in zip(records, subs)))

    def ids(names):
        return [kg.entity_index[a] for a in names if a in kg.entity_index]

    report = {"m": m, "alpha": alpha, "iters": iters, "facts": kg.num_facts, "entities": kg.num_entities}
    for name, recs in splits.items():
        part = subs[bounds[SPLIT_POS[name]]:bounds[SPLIT_POS[name] + 1]]
        report[f"{name}_questions"] = len(recs)
        report[f"{name}_coverage"] = coverage([ids(r["answers"]) for r in recs], part)
    report["coverage"] = coverage([ids(r["answers"]) for r in records], subs)
    report["avg_nodes"] = float(np.mean([s.num_nodes for s in subs])) if subs else 0.0
    report["avg_edges"] = float(np.mean([s.num_edges for s in subs])) if subs else 0.0
    with open(out / "coverage.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump({"m": m, "alpha": alpha, "iters": iters, **(meta or {})}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


SPLIT_POS = {"train": 0, "dev": 1, "test": 2}


def to_instances(kg: KnowledgeGraph, questions: Sequence[GeneratedQuestion], prefix: str = "q") -> list[QuestionInstance]:
    """In-memory instances (no files) for experiments; subgraphs are attached separately."""
    out = []
    for rec in question_records(questions, prefix):
        out.append(QuestionInstance(
            rec["qid"], rec["text"], [kg.entity_index[s] for s in rec["seeds"]],
            [kg.entity_index[a] for a in rec["answers"]], lf=rec["lf"],
        ))
    return out


def config_dict(config: GenConfig) -> dict:
    data = asdict(config)
    data["templates"] = list(config.templates) if config.templates else None
    return data
