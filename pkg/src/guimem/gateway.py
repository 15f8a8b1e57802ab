"""Clients for chat-with-images models and web search, plus the prompt
catalog used by the data flywheel.

The catalog templates are fixed text with {slot} placeholders; rendering is
pure substitution, so golden tests can pin the exact bytes. Mock clients
are pure functions of (request digest, seed) and keep a call log so tests
can assert call budgets. Real adapters read credentials from environment
variables and are only exercised behind an opt-in flag.
"""

from __future__ import annotations

import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from .errors import ChatClientError, MissingSlot, SearchClientError
from .util import derive_seed, record_line, stable_digest

# --- prompt catalog ------------------------------------------------------------

PAGE_CONTENT_EXTRACTION = (
    "You are an expert web page analyzer. Analyze the given website and "
    "screenshot and extract all useful information in detail. If the page is "
    "blocked (e.g. 403, 404, has captcha, etc.), directly return 'blocked'. "
    "Otherwise, return a detailed description of the page content.\n"
    "\n"
    "URL: {url}"
)

PAGE_INFO_EXTRACTION = (
    "You are an expert web page analyzer. Analyze the given website and "
    "screenshot and extract all useful information for task generation.\n"
    "\n"
    "URL: {url}\n"
    "\n"
    "Category: {category}\n"
    "\n"
    "Page Content: {page_content}\n"
    "\n"
    "Based on the URL, category, and page content above, provide a "
    "comprehensive summary of:\n"
    "\n"
    "1. Website type and purpose - its primary intended use cases, problems "
    "that can be solved on this site\n"
    "\n"
    "2. Navigation structure and key sections\n"
    "\n"
    "3. Interactive elements (buttons, forms, links, etc.)\n"
    "\n"
    "4. Content types present (articles, product listings, archives, etc.)\n"
    "\n"
    "5. Anything unusual or unique to this site\n"
    "\n"
    "6. IGNORE any cookie notices, privacy popups, log in buttons, site "
    "errors, ads, or other elements not specific to the site's function.\n"
    "\n"
    "Focus on information that would be useful for generating problems for "
    "web automation to solve. Think about what human users might want to "
    "achieve on this website.\n"
    "\n"
    "Provide a clear, structured summary that captures these essential "
    "aspects of the website for task generation purposes."
)

INITIAL_TASK_GENERATION = (
    "You are an expert generator of task problems for web automation. Based "
    "on the website analysis and screenshot, generate 10 diverse task "
    "problems that a web agent could solve on this website.\n"
    "\n"
    "URL: {url}\n"
    "\n"
    "Category: {category}\n"
    "\n"
    "IMPORTANT: Generate direct, actionable problems with a solution. Task "
    "problems should be specific and achievable.\n"
    "\n"
    "Generate exactly 10 diverse, direct instruction task problems that:\n"
    "\n"
    "1. Have a clear, specific objective; a problem to solve\n"
    "\n"
    "2. Are achievable within the website's scope\n"
    "\n"
    "3. Test diverse skills like navigation, information gathering, "
    "information synthesis in order to solve problems\n"
    "\n"
    "4. Require multiple steps to solve, not a single action\n"
    "\n"
    "5. Have measurable, verifiable success criteria; avoid vague, "
    "unverifiable tasks like 'Read a paragraph' or 'Explore a page'. "
    "Instead, focus on a clear, deliberate end goal.\n"
    "\n"
    "6. IMPORTANT: Do NOT write tasks that contain overly specific "
    "instructions like 'Click on X...' or 'Type X...'. These are not "
    "problems to be solved. The task problem should not direct the agent on "
    "what to do, but rather what to achieve.\n"
    "\n"
    "7. Are distinct, not related to each other, and do not require "
    "knowledge or completion of previous task problems.\n"
    "\n"
    "For each task problem, provide:\n"
    "\n"
    "- Task problem description (direct instruction with specific "
    "requirements)\n"
    "\n"
    "- Expected outcome (what should be accomplished, what condition needs "
    "to be checked to indicate success)\n"
    "\n"
    "- Difficulty level (easy/medium/hard)\n"
    "\n"
    "{examples_section}\n"
    "\n"
    "Format your response as exactly 10 tasks, one per line, with this "
    "structure:\n"
    "\n"
    "1. [Task Description] | [Expected Outcome] | [Difficulty]\n"
    "\n"
    "2. [Task Description] | [Expected Outcome] | [Difficulty]\n"
    "\n"
    "3. [Task Description] | [Expected Outcome] | [Difficulty]\n"
    "\n"
    "Example format:\n"
    "\n"
    "1. Find a news article about climate change published in the last week "
    "| Should locate and display a recent climate change article | Easy\n"
    "\n"
    "2. Search for iPhone 12 Pro with price below $800 | Should have "
    "navigated to a page for iPhone 12 Pro models under $800 | Medium\n"
    "\n"
    "3. Book a hotel in New York for 2 people for next weekend | Should "
    "find and select a specific hotel for 2 people | Medium\n"
    "\n"
    "4. Find the top 3 customer reviews for Nike running shoes | Should "
    "locate and display a page showing the top 3 reviews | Easy\n"
    "\n"
    "5. Compare prices of Samsung Galaxy phones between $500-700 | Should "
    "find a page comparing multiple Samsung phones in that price range | "
    "Medium\n"
    "\n"
    "6. Find the paper with the most citations under the Computer Science "
    "category | Should identify and display the page of an AI paper | Hard\n"
    "\n"
    "Respond only with the 10 tasks in the specified format, no additional "
    "text.\n"
    "\n"
    "Website Analysis: {info_summary}"
)

TASK_REFINEMENT = (
    "You will be given a task instruction. Please refine it with the "
    "following requirements:\n"
    "\n"
    "1. Imitate the speech style of a human user. Make it more natural and "
    "diverse.\n"
    "\n"
    "2. Remove specific hints on how to achieve the task. (e.g. press which "
    "button, click which link, etc.)\n"
    "\n"
    "3. The task should remain unambiguous and clear, and the task's goal "
    "must remain the same.\n"
    "\n"
    "For example, you should refine:\n"
    "\n"
    "\"Use the \"Price range\" filter on the Ryanair website to limit the "
    "flight options to $50-100.\"\n"
    "\n"
    "into:\n"
    "\n"
    "\"Find flights from London to Paris with a price range of $50-100.\"\n"
    "\n"
    "or\n"
    "\n"
    "\"I only have a limited budget for flights. Could you help find "
    "flights from London to Paris with a price range of $50-100.\"\n"
    "\n"
    "You should refine:\n"
    "\n"
    "\"Import email messages from another email program by clicking the "
    "\"Import\" button under the \"Import from Another Program\" section.\"\n"
    "\n"
    "into:\n"
    "\n"
    "\"Please import email messages from another email program.\"\n"
    "\n"
    "or\n"
    "\n"
    "\"I have some emails in my other email program. Could you help me "
    "import them into Thunderbird?\"\n"
    "\n"
    "You should refine:\n"
    "\n"
    "\"Click on the \"About Us\" link to learn more about the company's "
    "history and mission.\"\n"
    "\n"
    "into:\n"
    "\n"
    "\"Please provide information about the company's history and "
    "mission.\"\n"
    "\n"
    "or\n"
    "\n"
    "\"Find an \"About Us' or similar page on the website that describes "
    "the company's history and mission.\"\n"
    "\n"
    "The original instruction is:\n"
    "\n"
    "{instruction}\n"
    "\n"
    "Refine it and return the refined instruction text in this exact "
    "format:\n"
    "\n"
    "ORIGINAL: [the original instruction]\n"
    "\n"
    "REFINED: [the refined instruction]"
)

PROMPT_CATALOG: Mapping[str, str] = {
    "page_content_extraction": PAGE_CONTENT_EXTRACTION,
    "page_info_extraction": PAGE_INFO_EXTRACTION,
    "initial_task_generation": INITIAL_TASK_GENERATION,
    "task_refinement": TASK_REFINEMENT,
}

_SLOT_RE = re.compile(r"\{(\w+)\}")


def prompt_slots(name: str) -> set[str]:
    return set(_SLOT_RE.findall(PROMPT_CATALOG[name]))


def render_prompt(name: str, slots: Mapping[str, str],
                  catalog: Mapping[str, str] = PROMPT_CATALOG) -> str:
    """Substitute every {slot}; identical slots always yield identical bytes."""
    template = catalog[name]
    required = set(_SLOT_RE.findall(template))
    missing = required - set(slots)
    if missing:
        raise MissingSlot(f"prompt {name!r} missing slots: {sorted(missing)}")
    return _SLOT_RE.sub(lambda m: str(slots[m.group(1)]), template)


# --- chat clients -----------------------------------------------------------------

@dataclass(frozen=True)
class ChatRequest:
    text: str
    system: str = ""
    images: tuple[bytes, ...] = ()

    def digest(self) -> str:
        h = [self.system, "\x00", self.text]
        for img in self.images:
            h.append("\x00img:" + stable_digest(img))
        return stable_digest("".join(h).encode("utf-8"))


class CallLog:
    """Thread-safe append-only log of (request digest, response) pairs."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: list[tuple[str, str]] = []

    def append(self, request_digest: str, response: str) -> None:
        with self._lock:
            self._entries.append((request_digest, response))

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[tuple[str, str]]:
        with self._lock:
            return list(self._entries)

    def save(self, path: str | Path) -> None:
        lines = [record_line({"index": i, "request": d, "response": r})
                 for i, (d, r) in enumerate(self.entries())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class ChatClient(Protocol):
    name: str
    call_log: CallLog

    def complete(self, request: ChatRequest) -> str: ...


class MockChat:
    """Deterministic chat stub: the reply is a pure function of the request
    digest and the seed. Optional rules map matched substrings to replies."""

    def __init__(self, seed: int = 0, rules: Sequence[tuple[str, str]] = (),
                 name: str = "mock-chat"):
        self.seed = seed
        self.rules = tuple(rules)
        self.name = name
        self.call_log = CallLog()

    def complete(self, request: ChatRequest) -> str:
        reply = None
        for needle, response in self.rules:
            if needle in request.text:
                reply = response
                break
        if reply is None:
            reply = f"mock-reply-{derive_seed(self.seed, request.digest()):016x}"
        self.call_log.append(request.digest(), reply)
        return reply


class SearchClient(Protocol):
    def search(self, query: str) -> list[str]: ...


class FixtureSearch:
    """Deterministic search results; explicit fixtures win, otherwise URLs
    are synthesized from the query and seed."""

    def __init__(self, fixture: Mapping[str, Sequence[str]] | None = None,
                 n_results: int = 20, seed: int = 0,
                 failing_queries: Sequence[str] = ()):
        self.fixture = dict(fixture or {})
        self.n_results = n_results
        self.seed = seed
        self.failing = set(failing_queries)

    def search(self, query: str) -> list[str]:
        if query in self.failing:
            raise SearchClientError(f"search backend refused query {query!r}")
        if query in self.fixture:
            return list(self.fixture[query])
        urls = []
        for i in range(self.n_results):
            h = derive_seed(self.seed, "search", query, i)
            urls.append(f"https://site-{h % 100_000:05d}.example.org/s{h % 7}")
        return urls


# --- live adapters (opt-in; never used by the test suite) ---------------------------

CHAT_API_KEY_VAR = "CM_CHAT_API_KEY"
CHAT_BASE_URL_VAR = "CM_CHAT_BASE_URL"
SEARCH_API_KEY_VAR = "CM_SEARCH_API_KEY"


class _RateLimiter:
    """Minimum interval between calls per host."""

    def __init__(self, min_interval_s: float = 0.5):
        self.min_interval_s = min_interval_s
        self._last: dict[str, float] = {}
        self._lock = threading.Lock()

    def wait(self, host: str) -> None:
        with self._lock:
            last = self._last.get(host, 0.0)
            delta = time.monotonic() - last
            pause = max(0.0, self.min_interval_s - delta)
            self._last[host] = time.monotonic() + pause
        if pause > 0:
            time.sleep(pause)


class HttpChatClient:
    """POSTs {system, text, image count} to a hosted VLM endpoint."""

    def __init__(self, name: str = "live-chat", timeout_s: float = 60.0):
        self.base_url = os.environ.get(CHAT_BASE_URL_VAR, "")
        self.api_key = os.environ.get(CHAT_API_KEY_VAR, "")
        if not self.base_url or not self.api_key:
            raise ChatClientError(
                f"live chat requires {CHAT_BASE_URL_VAR} and {CHAT_API_KEY_VAR}")
        self.name = name
        self.timeout_s = timeout_s
        self.call_log = CallLog()
        self._limiter = _RateLimiter()

    def complete(self, request: ChatRequest) -> str:
        import base64

        import requests

        self._limiter.wait(self.base_url)
        payload = {
            "system": request.system,
            "text": request.text,
            "images": [base64.b64encode(img).decode("ascii")
                       for img in request.images],
        }
        try:
            resp = requests.post(self.base_url, json=payload,
                                 headers={"Authorization": f"Bearer {self.api_key}"},
                                 timeout=self.timeout_s)
            resp.raise_for_status()
            reply = resp.json()["text"]
        except Exception as exc:
            raise ChatClientError(str(exc)) from exc
        self.call_log.append(request.digest(), reply)
        return reply


class HttpSearchClient:
    """GETs a SerpAPI-style endpoint and returns the organic result URLs."""

    def __init__(self, endpoint: str = "https://serpapi.com/search",
                 timeout_s: float = 30.0):
        self.api_key = os.environ.get(SEARCH_API_KEY_VAR, "")
        if not self.api_key:
            raise SearchClientError(f"live search requires {SEARCH_API_KEY_VAR}")
        self.endpoint = endpoint
        self.timeout_s = timeout_s
        self._limiter = _RateLimiter()

    def search(self, query: str) -> list[str]:
        import requests

        self._limiter.wait(self.endpoint)
        try:
            resp = requests.get(self.endpoint,
                                params={"q": query, "api_key": self.api_key},
                                timeout=self.timeout_s)
            resp.raise_for_status()
            results = resp.json().get("organic_results", [])
        except Exception as exc:
            raise SearchClientError(str(exc)) from exc
        return [r["link"] for r in results if "link" in r]
