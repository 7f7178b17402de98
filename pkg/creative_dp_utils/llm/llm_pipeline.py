"""
Single-row LLM calls of the data-construction pipeline and the GSB judge.

    profile_user_interests      CoT round 1: interests from the click history
    generate_personalized_title CoT round 2: traits + selling points + title
    hallucination_filter        strict grounding check, "{}" means pass
    judge_pair                  one GSB judge call in a given order
"""

import asyncio
import hashlib
import json
import logging
import re
from typing import Awaitable, Callable, List, Optional, Sequence, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from creative_dp_utils.datamodel import Ad, FilterVerdict, Item
from creative_dp_utils.llm.llm_client import EMPTY_FINDINGS, BaseLLMClient, ClientCallError
from creative_dp_utils.llm.llm_conversation_manager import ConversationManager
from creative_dp_utils.llm.prompt_templates import (
    GSB_JUDGE,
    HALLUCINATION_FILTER,
    INTEREST_PROFILING,
    TITLE_GENERATION,
    TITLE_GENERATION_DIRECT,
    TITLE_GENERATION_PROFILE_ONLY,
    TITLE_GENERATION_SINGLE_ROUND,
    PromptTemplate,
    format_history,
    format_optional,
    format_selling_points,
    load_template,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")

COT_TEMPLATES = {
    "two_round": TITLE_GENERATION,
    "single_round": TITLE_GENERATION_SINGLE_ROUND,
    "profile_only": TITLE_GENERATION_PROFILE_ONLY,
    "direct": TITLE_GENERATION_DIRECT,
}
# modes whose title prompt continues the profiling conversation
FOLLOW_UP_MODES = ("two_round", "profile_only")

_JSON_BLOCK = re.compile(r"```(?:json)?\s*(\{.*?\})\s*```", re.DOTALL)


class TitleParseError(ValueError):
    """The teacher's title answer has no parseable structured section."""

    def __init__(self, message: str, raw_text: str):
        super().__init__(f"{message}: {raw_text[:200]!r}")
        self.raw_text = raw_text


class TitleResult(BaseModel):
    model_config = ConfigDict(extra="ignore", frozen=True)

    selected_user_traits: List[str] = Field(default_factory=list)
    selected_selling_points: List[str] = Field(default_factory=list)
    title: str


class RetryPolicy(BaseModel):
    max_retries: int = 3
    retry_delay: float = 1.0


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:12]


async def call_with_retries(call: Callable[[], Awaitable[T]], description: str,
                            policy: Optional[RetryPolicy] = None) -> T:
    """
    Await ``call()`` up to ``max_retries`` times with exponential backoff.

    Raises:
        ClientCallError: when every attempt failed, carrying the attempt count
    """
    policy = policy or RetryPolicy()
    last_error: Optional[Exception] = None
    for attempt in range(1, policy.max_retries + 1):
        try:
            return await call()
        except Exception as e:
            last_error = e
            logger.warning(f"{description} failed (attempt {attempt}/{policy.max_retries}): {e}")
            if attempt < policy.max_retries:
                await asyncio.sleep(policy.retry_delay * 2 ** (attempt - 1))
    raise ClientCallError(f"{description} failed: {last_error}", policy.max_retries) from last_error


async def _ask(client: BaseLLMClient, conversation: ConversationManager, prompt: str, description: str,
               policy: Optional[RetryPolicy]) -> str:
    conversation.add_message(role="user", content=prompt)
    logger.debug(f"{description}: prompt {prompt_hash(prompt)}")
    response = await call_with_retries(lambda: client.get_response(conversation.messages), description, policy)
    conversation.add_message(role="assistant", content=response)
    return response


async def profile_user_interests(history: Sequence[Item], query: Optional[str], client: BaseLLMClient,
                                 conversation: Optional[ConversationManager] = None,
                                 template: Optional[PromptTemplate] = None,
                                 policy: Optional[RetryPolicy] = None) -> str:
    """Round 1: the teacher's interest profile, returned verbatim."""
    if not history:
        raise ValueError("cannot profile a user with an empty history")
    template = template or load_template(INTEREST_PROFILING)
    conversation = conversation or ConversationManager("data_construction")
    prompt = template.render(history=format_history(history), query=format_optional(query))
    return await _ask(client, conversation, prompt, "interest profiling", policy)


def parse_title_response(raw_text: str, require_cot: bool = True) -> TitleResult:
    """
    Read the fenced ```json section (or the outermost braces as a fallback).

    With ``require_cot`` the selected traits and selling points must be present.
    """
    match = _JSON_BLOCK.search(raw_text)
    if match:
        candidate = match.group(1)
    else:
        start, end = raw_text.find("{"), raw_text.rfind("}")
        if start < 0 or end <= start:
            raise TitleParseError("no JSON section in title response", raw_text)
        candidate = raw_text[start: end + 1]
    try:
        payload = json.loads(candidate)
    except json.JSONDecodeError as e:
        raise TitleParseError(f"malformed JSON in title response ({e.msg})", raw_text) from e
    if not isinstance(payload, dict):
        raise TitleParseError("title response JSON is not an object", raw_text)
    if require_cot:
        missing = [key for key in ("selected_user_traits", "selected_selling_points") if key not in payload]
        if missing:
            raise TitleParseError(f"title response lacks {', '.join(missing)}", raw_text)
    try:
        result = TitleResult.model_validate(payload)
    except ValidationError as e:
        raise TitleParseError("title response fields are invalid", raw_text) from e
    title = " ".join(result.title.split())
    if not title:
        raise TitleParseError("title is empty", raw_text)
    return result.model_copy(update={"title": title})


async def generate_personalized_title(history: Sequence[Item], interests: str, ad: Ad, query: Optional[str],
                                      client: BaseLLMClient, conversation: Optional[ConversationManager] = None,
                                      cot_mode: str = "two_round", template: Optional[PromptTemplate] = None,
                                      policy: Optional[RetryPolicy] = None) -> TitleResult:
    """
    Round 2: select traits and selling points, then write the title.

    In two_round / profile_only mode the prompt is appended to ``conversation``
    (the one holding round 1); single_round and direct use a fresh conversation.

    Raises:
        ValueError: interests empty where the prompt needs them
        TitleParseError: the response has no usable structured section
        ClientCallError: the client kept failing
    """
    if cot_mode not in COT_TEMPLATES:
        raise ValueError(f"unknown cot_mode '{cot_mode}', expected one of {tuple(COT_TEMPLATES)}")
    if cot_mode in FOLLOW_UP_MODES and not interests.strip():
        raise ValueError("title generation needs the interest profile from the first round")
    template = template or load_template(COT_TEMPLATES[cot_mode])
    if cot_mode not in FOLLOW_UP_MODES or conversation is None:
        conversation = ConversationManager("data_construction")

    values = {
        "history": format_history(history),
        "interests": interests,
        "ad_title": ad.original_title,
        "selling_points": format_selling_points(ad.selling_points),
        "query": format_optional(query),
    }
    prompt = template.render(**{name: values[name] for name in template.placeholders})
    response = await _ask(client, conversation, prompt, "title generation", policy)
    return parse_title_response(response, require_cot=cot_mode in ("two_round", "single_round"))


async def hallucination_filter(title: str, ad: Ad, client: BaseLLMClient,
                               template: Optional[PromptTemplate] = None,
                               policy: Optional[RetryPolicy] = None) -> FilterVerdict:
    """Pass iff the checker answers exactly "{}"; otherwise fail with its findings as the reason."""
    if not title.strip():
        raise ValueError("title is empty")
    template = template or load_template(HALLUCINATION_FILTER)
    prompt = template.render(
        ad_title=ad.original_title, selling_points=format_selling_points(ad.selling_points), title=title
    )
    conversation = ConversationManager("data_construction")
    response = await _ask(client, conversation, prompt, "hallucination filter", policy)
    if response == EMPTY_FINDINGS:
        return FilterVerdict.ok()
    return FilterVerdict.fail(response.strip() or "empty checker response")


def parse_judge_answer(raw_text: str) -> str:
    """'A', 'B' or 'Same' from the judge's one-word answer."""
    words = re.findall(r"[A-Za-z]+", raw_text)
    if not words:
        raise ValueError(f"judge answer has no verdict: {raw_text!r}")
    answer = words[0].lower()
    if answer in ("a", "b"):
        return answer.upper()
    if answer == "same":
        return "Same"
    raise ValueError(f"judge answer is not A, B or Same: {raw_text!r}")


async def judge_pair(title_first: str, title_second: str, interests: str, ad: Ad, client: BaseLLMClient,
                     template: Optional[PromptTemplate] = None, policy: Optional[RetryPolicy] = None) -> str:
    """One judge call with ``title_first`` shown as title_a."""
    template = template or load_template(GSB_JUDGE)
    prompt = template.render(
        interests=format_optional(interests), ad_title=ad.original_title,
        selling_points=format_selling_points(ad.selling_points), title_a=title_first, title_b=title_second,
    )

    async def ask() -> str:
        conversation = ConversationManager("judging")
        conversation.add_message(role="user", content=prompt)
        return parse_judge_answer(await client.get_response(conversation.messages))

    return await call_with_retries(ask, "GSB judge", policy)
