"""
Chat history for one teacher or judge conversation.

The title-generation round reads the profiling round's answer from the same
conversation, so both rounds share one instance per dataset row.
"""
from creative_dp_utils.llm.instructions import judge_system_prompt as JUDGE_SYSTEM_PROMPT
from creative_dp_utils.llm.instructions import system_prompt as COPYWRITER_SYSTEM_PROMPT

INTERACTION_TYPES = ("data_construction", "judging")
ROLES = ("user", "assistant", "system")


class ConversationManager:
    """
    Ordered chat messages, seeded with the system prompt for the interaction.

    Parameters
    ----------
    interaction_type (str): "data_construction" (copywriter) or "judging".
    """
    def __init__(self, interaction_type: str):
        if interaction_type not in INTERACTION_TYPES:
            raise ValueError(f"`interaction_type` not one of {INTERACTION_TYPES}")
        self.interaction_type = interaction_type
        self.messages = []
        if interaction_type == "data_construction":
            self.add_message(role="system", content=COPYWRITER_SYSTEM_PROMPT)
        else:
            self.add_message(role="system", content=JUDGE_SYSTEM_PROMPT)

    def add_message(self, role: str, content: str):
        """
        Append one message; role is "user", "assistant" or "system".
        """
        if role not in ROLES:
            raise ValueError(f"`role` not one of {ROLES}")
        self.messages.append({"role": role, "content": content})

    @property
    def rounds(self) -> int:
        """Completed user/assistant exchanges."""
        return sum(1 for message in self.messages if message["role"] == "assistant")
