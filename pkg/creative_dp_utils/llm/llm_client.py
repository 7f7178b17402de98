"""
LLM clients used as the data-construction teacher and as the GSB judge.

``LLMClient`` talks to an OpenAI-compatible endpoint through the agents SDK.
``MockLLMClient`` answers every prompt template deterministically from the
prompt text alone, for tests and offline smoke runs.
"""

# OpenAI imports
from agents import Agent, Runner, set_tracing_disabled, OpenAIResponsesModel
from openai import AsyncOpenAI
from dotenv import load_dotenv

# Standard library imports
import abc
import hashlib
import json
import os
import re
from typing import Callable, Dict, List, Optional, Union

from creative_dp_utils.config import LLMConfig
from creative_dp_utils.llm.prompt_templates import (
    EMPTY_FIELD,
    GSB_JUDGE,
    HALLUCINATION_FILTER,
    INTEREST_PROFILING,
    TITLE_GENERATION,
    TITLE_GENERATION_DIRECT,
    TITLE_GENERATION_PROFILE_ONLY,
    TITLE_GENERATION_SINGLE_ROUND,
    template_task,
)

EMPTY_FINDINGS = "{}"


class ClientCallError(RuntimeError):
    """An LLM call kept failing; ``attempts`` is how many times it was tried."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class BaseLLMClient(abc.ABC):
    """Chat-style client: a list of {role, content} messages in, response text out."""

    model_name: str = "unknown"

    @abc.abstractmethod
    async def get_response(self, messages: list) -> str:
        ...

    async def complete(self, prompt: str, system_prompt: Optional[str] = None) -> str:
        """Single-turn convenience wrapper over ``get_response``."""
        messages = [{"role": "system", "content": system_prompt}] if system_prompt else []
        messages.append({"role": "user", "content": prompt})
        return await self.get_response(messages)


class LLMClient(BaseLLMClient):
    """
    Client for an OpenAI-compatible chat endpoint.

    Attributes:
        client (AsyncOpenAI): The OpenAI client instance.
        model_object (OpenAIResponsesModel): Model wrapper handed to the agent runner.
    """

    def __init__(self, model_name: str = "gpt-4.1", base_url: str = "https://api.openai.com/v1",
                 api_key_env: str = "CREATIVE_LLM_API_KEY"):
        load_dotenv()
        api_key = os.getenv(api_key_env)
        if not api_key:
            raise ValueError(f"Environment variable {api_key_env} is not set; it must hold the LLM API key")
        self.model_name = model_name
        self.base_url = base_url
        self.client = AsyncOpenAI(base_url=self.base_url, api_key=api_key)
        self.model_object = OpenAIResponsesModel(model=self.model_name, openai_client=self.client)

    @classmethod
    def from_config(cls, llm_cfg: LLMConfig) -> "LLMClient":
        return cls(model_name=llm_cfg.model_name, base_url=llm_cfg.base_url, api_key_env=llm_cfg.api_key_env)

    async def get_response(self, messages: list) -> str:
        """
        Get a response from the LLM client.

        Parameters
        ----------
            messages (list): A list of messages to send to the model.
        Returns
        -------
            The model's final text output.
        """
        set_tracing_disabled(disabled=True)
        result = await Runner.run(Agent(name="Copywriter", model=self.model_object), input=messages)
        return result.final_output


Override = Union[str, Callable[[str], str]]


def _section(prompt: str, tag: str) -> str:
    match = re.search(rf"<{tag}>\n(.*?)\n</{tag}>", prompt, flags=re.DOTALL)
    if not match:
        return ""
    value = match.group(1).strip()
    return "" if value == EMPTY_FIELD else value


def _stable_int(text: str) -> int:
    return int(hashlib.sha256(text.encode("utf-8")).hexdigest()[:8], 16)


def _words(text: str) -> set:
    return set(re.findall(r"\w+", text.lower()))


class MockLLMClient(BaseLLMClient):
    """
    Deterministic stand-in for the teacher and the judge.

    Responses depend only on the last user prompt:
    - interest_profiling: three dimension lines built from the history titles
    - title_generation*: a fenced JSON answer whose title joins the original
      title with one selling point picked by the user's interests
    - hallucination_filter: "{}" for titles whose hash is divisible by
      ``pass_modulus``, a findings object otherwise
    - gsb_judge: prefers the title sharing more words with the interests

    ``overrides`` maps a task name to a canned response or a callable on the prompt.
    """

    def __init__(self, pass_modulus: int = 4, overrides: Optional[Dict[str, Override]] = None,
                 model_name: str = "mock-teacher"):
        if pass_modulus < 1:
            raise ValueError("pass_modulus must be >= 1")
        self.pass_modulus = pass_modulus
        self.overrides = dict(overrides or {})
        self.model_name = model_name
        self.calls: List[str] = []

    @classmethod
    def from_config(cls, llm_cfg: LLMConfig) -> "MockLLMClient":
        return cls(pass_modulus=llm_cfg.mock_pass_modulus)

    async def get_response(self, messages: list) -> str:
        prompt = next((m["content"] for m in reversed(messages) if m.get("role") == "user"), "")
        self.calls.append(prompt)
        task = template_task(prompt)
        if task in self.overrides:
            override = self.overrides[task]
            return override(prompt) if callable(override) else override
        if task == INTEREST_PROFILING:
            return self._profile(prompt)
        if task in (TITLE_GENERATION, TITLE_GENERATION_SINGLE_ROUND):
            return self._title(prompt, with_cot=True)
        if task in (TITLE_GENERATION_PROFILE_ONLY, TITLE_GENERATION_DIRECT):
            return self._title(prompt, with_cot=False)
        if task == HALLUCINATION_FILTER:
            return self._hallucination(prompt)
        if task == GSB_JUDGE:
            return self._judge(prompt)
        raise ValueError(f"mock client has no responder for task {task!r}")

    @staticmethod
    def _history_titles(prompt: str) -> List[str]:
        titles = []
        for line in _section(prompt, "history").splitlines():
            title = re.sub(r"^\d+\.\s*", "", line).split(" ; ")[0].strip()
            if title and title not in titles:
                titles.append(title)
        return titles

    def _profile(self, prompt: str) -> str:
        titles = self._history_titles(prompt)
        query = _section(prompt, "query")
        return (
            f"Long-term interests: {', '.join(titles[:3])}\n"
            f"Short-term preferences: {titles[-1] if titles else 'none'}\n"
            f"Specific needs: {query or 'none stated'}"
        )

    def _title(self, prompt: str, with_cot: bool) -> str:
        ad_title = _section(prompt, "ad_title")
        points = [line[2:].strip() for line in _section(prompt, "selling_points").splitlines() if line.startswith("- ")]
        interests = _section(prompt, "interests") or _section(prompt, "history")
        chosen = points[_stable_int(interests) % len(points)] if points else None
        title = f"{ad_title}, {chosen}" if chosen else ad_title
        answer = {"title": title}
        if with_cot:
            first_line = interests.splitlines()[0] if interests else ""
            answer = {
                "selected_user_traits": [first_line.split(":", 1)[-1].strip()] if first_line else [],
                "selected_selling_points": [chosen] if chosen else [],
                "title": title,
            }
        return f"Here is the personalized title.\n```json\n{json.dumps(answer, ensure_ascii=False)}\n```"

    def _hallucination(self, prompt: str) -> str:
        title = _section(prompt, "title")
        if _stable_int(title) % self.pass_modulus == 0:
            return EMPTY_FINDINGS
        return json.dumps({"unsupported_content": [title]}, ensure_ascii=False)

    def _judge(self, prompt: str) -> str:
        interests = _words(_section(prompt, "interests"))
        score_a = len(_words(_section(prompt, "title_a")) & interests)
        score_b = len(_words(_section(prompt, "title_b")) & interests)
        if score_a > score_b:
            return "A"
        if score_b > score_a:
            return "B"
        return "Same"


def build_llm_client(llm_cfg: LLMConfig) -> BaseLLMClient:
    """Client selected by the ``llm.client`` config flag."""
    if llm_cfg.client == "mock":
        return MockLLMClient.from_config(llm_cfg)
    return LLMClient.from_config(llm_cfg)
