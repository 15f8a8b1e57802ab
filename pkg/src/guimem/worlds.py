"""Fixture worlds: a shop, a wiki, seeded isomorphic task families, and the
generic navigation sites used by mock flywheel runs.

Family worlds share one page-graph shape (a depth-3 click tree with three
branches per page) but differ in surface text and in which leaf satisfies
the goal. Variants inside a family keep the same goal path, so a plan
retrieved from a sibling variant transfers verbatim; plans from other
families lead to the wrong leaf.
"""

from __future__ import annotations

from pathlib import Path

from .core import SEED_CATEGORIES
from .simenv import Goal, SimElement, SimPage, SimTask, Transition, WorldDef, \
    save_world
from .util import derive_seed, rng_for

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _word(rng, syllables: int = 2) -> str:
    return "".join(_CONSONANTS[int(rng.integers(len(_CONSONANTS)))]
                   + _VOWELS[int(rng.integers(len(_VOWELS)))]
                   for _ in range(syllables))


def _family_theme(family: int) -> tuple[int, int, int]:
    """Well-separated page tints: hues spaced around the wheel, three
    brightness bands. Distinct families must look distinct on screen."""
    hue = (family * 47) % 360
    value = 190 + 25 * (family % 3)
    c = value - 70
    x = c * (60 - abs(hue % 120 - 60)) // 60
    base = value - c
    sector = hue // 60
    rgb = [(c, x, 0), (x, c, 0), (0, c, x), (0, x, c), (x, 0, c), (c, 0, x)][sector % 6]
    return tuple(base + ch for ch in rgb)


def make_shop_world() -> WorldDef:
    pages = {
        "home": SimPage(id="home", title="Sim Shop", elements=(
            SimElement(1, (20, 30, 200, 52), "search products", "input"),
            SimElement(2, (210, 30, 300, 52), "Search", "button"),
            SimElement(3, (20, 70, 300, 92), "Featured: pro easel stand", "link"),
            SimElement(4, (20, 110, 300, 170), "Welcome to the sim shop", "text"),
        )),
        "results_paint": SimPage(id="results_paint", title="Results: acrylic paint",
                                 height=320, elements=(
            SimElement(10, (20, 30, 300, 52), "Acrylic paint set 24 colors $35", "link"),
            SimElement(11, (20, 60, 300, 82), "Deluxe acrylic set 36 colors $59", "link"),
            SimElement(12, (20, 260, 300, 282), "Acrylic mega kit 48 colors $99", "link"),
        )),
        "results_empty": SimPage(id="results_empty", title="No results", elements=(
            SimElement(20, (20, 30, 300, 60), "No products found", "text"),
        )),
        "product_budget": SimPage(id="product_budget", title="Paint set 24", elements=(
            SimElement(30, (20, 30, 300, 60), "Acrylic paint set 24 colors $35", "text"),
            SimElement(31, (20, 70, 140, 92), "Add to cart", "button"),
        )),
        "product_deluxe": SimPage(id="product_deluxe", title="Paint set 36", elements=(
            SimElement(40, (20, 30, 300, 60), "Deluxe acrylic set 36 colors $59", "text"),
        )),
        "product_mega": SimPage(id="product_mega", title="Mega kit 48", elements=(
            SimElement(50, (20, 30, 300, 60), "Acrylic mega kit 48 colors $99", "text"),
        )),
        "featured": SimPage(id="featured", title="Pro easel", elements=(
            SimElement(60, (20, 30, 300, 60), "Pro easel stand $120", "text"),
        )),
    }
    transitions = (
        Transition("home", 2, "results_paint", requires={1: "acrylic paint"}),
        Transition("home", 2, "results_empty"),
        Transition("home", 3, "featured"),
        Transition("results_paint", 10, "product_budget"),
        Transition("results_paint", 11, "product_deluxe"),
        Transition("results_paint", 12, "product_mega"),
    )
    tasks = {
        "budget-paint": SimTask(
            id="budget-paint",
            text="Find a beginner acrylic paint set with at least 24 colors "
                 "priced under $40 and stop on its product page",
            expected_outcome="The product page for the under-$40 acrylic "
                             "paint set is open",
            difficulty="medium",
            goal=Goal(type="all", of=(Goal(type="on_page", page="product_budget"),
                                      Goal(type="stopped")))),
        "mega-kit": SimTask(
            id="mega-kit",
            text="Open the product page for the largest acrylic paint kit "
                 "in the catalog",
            expected_outcome="The mega kit product page is open",
            difficulty="hard",
            goal=Goal(type="all", of=(Goal(type="on_page", page="product_mega"),
                                      Goal(type="stopped")))),
        "featured-easel": SimTask(
            id="featured-easel",
            text="Show me the featured easel offer",
            expected_outcome="The featured easel page is open",
            difficulty="easy",
            goal=Goal(type="all", of=(Goal(type="on_page", page="featured"),
                                      Goal(type="stopped")))),
    }
    return WorldDef(id="simshop", start_page="home", pages=pages,
                    transitions=transitions, tasks=tasks, category="shopping")


def make_wiki_world() -> WorldDef:
    pages = {
        "home": SimPage(id="home", title="Sim Wiki", elements=(
            SimElement(1, (20, 30, 200, 52), "search the wiki", "input"),
            SimElement(2, (210, 30, 280, 52), "Go", "button"),
            SimElement(3, (20, 70, 300, 92), "Random article", "link"),
        )),
        "article_shanghai": SimPage(id="article_shanghai", title="Shanghai", elements=(
            SimElement(10, (20, 30, 300, 80), "Shanghai is a large coastal city", "text"),
            SimElement(11, (20, 90, 300, 112), "Oriental Pearl Tower", "link"),
        )),
        "article_tower": SimPage(id="article_tower", title="Pearl Tower", elements=(
            SimElement(20, (20, 30, 300, 80),
                       "The Oriental Pearl Tower has eleven spheres", "text"),
            SimElement(21, (20, 90, 300, 112), "Back to Shanghai", "link"),
        )),
        "not_found": SimPage(id="not_found", title="Not found", elements=(
            SimElement(30, (20, 30, 300, 60), "No matching article", "text"),
        )),
    }
    transitions = (
        Transition("home", 2, "article_shanghai", requires={1: "shanghai"}),
        Transition("home", 2, "not_found"),
        Transition("home", 3, "article_shanghai"),
        Transition("article_shanghai", 11, "article_tower"),
        Transition("article_tower", 21, "article_shanghai"),
    )
    tasks = {
        "tower-spheres": SimTask(
            id="tower-spheres",
            text="Does the city center of Shanghai have a TV tower with "
                 "several spheres? Answer with the tower name.",
            expected_outcome="The answer names the Oriental Pearl Tower",
            difficulty="medium",
            goal=Goal(type="all", of=(Goal(type="on_page", page="article_tower"),
                                      Goal(type="answer_contains", value="pearl tower"),
                                      Goal(type="stopped")))),
    }
    return WorldDef(id="simwiki", start_page="home", pages=pages,
                    transitions=transitions, tasks=tasks, category="education")


# --- isomorphic task families -----------------------------------------------------

FAMILY_DEPTH = 3
FAMILY_BRANCH = 3


def family_goal_path(family: int, seed: int = 0) -> tuple[int, ...]:
    return tuple(derive_seed(seed, "family-path", family, d) % FAMILY_BRANCH
                 for d in range(FAMILY_DEPTH))


def family_task_id(family: int) -> str:
    return f"fam{family:02d}"


def make_family_world(family: int, variant: int, seed: int = 0) -> WorldDef:
    """One variant of one task family; isomorphic within the family.

    Each family has its own page tint (sites look different) and its own
    task vocabulary; variants reword the surface text only.
    """
    fam_rng = rng_for(seed, "family-words", family)
    fam_words = [_word(fam_rng) for _ in range(4)]
    theme = _family_theme(family)
    var_rng = rng_for(seed, "variant-words", family, variant)
    var_words = [_word(var_rng) for _ in range(2)]

    pages: dict[str, SimPage] = {}
    transitions: list[Transition] = []

    def node_id(path: tuple[int, ...]) -> str:
        return "root" if not path else "n" + "".join(str(d) for d in path)

    def build(path: tuple[int, ...]) -> None:
        pid = node_id(path)
        if len(path) == FAMILY_DEPTH:
            pages[pid] = SimPage(id=pid, title=f"{var_words[0]} {pid}", elements=(
                SimElement(0, (8, 20, 120, 44),
                           f"{fam_words[2]} {fam_words[3]} record {pid}", "text"),
            ))
            return
        elements = []
        for i in range(FAMILY_BRANCH):
            elements.append(SimElement(
                i, (8, 20 + 32 * i, 120, 44 + 32 * i),
                f"{var_words[i % 2]} section {i}", "link"))
            transitions.append(Transition(pid, i, node_id(path + (i,))))
        pages[pid] = SimPage(id=pid, title=f"{fam_words[0]} {pid}",
                             elements=tuple(elements))
        for i in range(FAMILY_BRANCH):
            build(path + (i,))

    build(())
    goal_leaf = node_id(family_goal_path(family, seed))
    task_id = family_task_id(family)
    task = SimTask(
        id=task_id,
        text=(f"Open the {fam_words[0]} {fam_words[1]} archive and locate the "
              f"{fam_words[2]} {fam_words[3]} record for {var_words[0]} {var_words[1]}"),
        expected_outcome=f"The {fam_words[2]} {fam_words[3]} record page is shown",
        difficulty="medium",
        goal=Goal(type="all", of=(Goal(type="on_page", page=goal_leaf),
                                  Goal(type="stopped"))),
    )
    return WorldDef(
        id=f"fam{family:02d}v{variant:03d}", start_page="root", pages=pages,
        transitions=tuple(transitions), tasks={task_id: task},
        category=SEED_CATEGORIES[family % len(SEED_CATEGORIES)],
        viewport=(128, 128), theme=theme,
    )


def write_family_worlds(directory: str | Path, n_families: int,
                        n_variants: int, seed: int = 0) -> list[Path]:
    """Write a world file per (family, variant); used by the eval sweep."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for family in range(n_families):
        for variant in range(n_variants):
            world = make_family_world(family, variant, seed)
            path = directory / f"{world.id}.world"
            save_world(world, path)
            paths.append(path)
    return paths


# --- generic navigation sites (mock flywheel environments) --------------------------

SITE_SECTIONS = ("about", "products", "contact", "news")


def make_site_world(env_url: str, category: str) -> WorldDef:
    """A small deterministic navigation site standing in for a live page.

    Solvable goals point at one of the four sections; the world also accepts
    tasks whose goal pages do not exist (rollouts then fail and the quality
    gate drops them).
    """
    slug = derive_seed(0, "site", env_url) % 10_000
    pages = {"home": SimPage(id="home", title=f"Site {slug}", elements=tuple(
        SimElement(i + 1, (20, 30 + 40 * i, 300, 58 + 40 * i),
                   section.capitalize(), "link")
        for i, section in enumerate(SITE_SECTIONS)
    ))}
    transitions = []
    for i, section in enumerate(SITE_SECTIONS):
        pages[section] = SimPage(id=section, title=f"{section} {slug}", elements=(
            SimElement(20, (20, 30, 300, 60), f"{section} of site {slug}", "text"),
            SimElement(9, (20, 70, 120, 92), "Home", "link"),
        ))
        transitions.append(Transition("home", i + 1, section))
        transitions.append(Transition(section, 9, "home"))
    return WorldDef(id=f"site{slug:04d}", start_page="home", pages=pages,
                    transitions=tuple(transitions), tasks={}, category=category)
