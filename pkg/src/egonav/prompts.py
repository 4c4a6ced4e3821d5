"""Prompt templates for marker description, memory retrieval, marker
selection and SFT rationale generation/filtering.

Template wording is kept byte-for-byte; only the ``{...}`` slots change.
"""
from __future__ import annotations

import enum


class PromptKind(enum.Enum):
    MARKER_DESCRIPTION = "MARKER_DESCRIPTION"
    MEMORY_RETRIEVAL = "MEMORY_RETRIEVAL"
    MARKER_SELECTION = "MARKER_SELECTION"
    RATIONALE_GENERATION = "RATIONALE_GENERATION"
    RATIONALE_FILTER = "RATIONALE_FILTER"


MARKER_DESCRIPTION = """\
You are an automated system with the capability to analyze the provided image.
Based on the numerical markers present in the image, please describe the surrounding environment relative to each marker's position.
Ensure that descriptions of different markers are distinct to maintain the uniqueness of each marker.
The marker number should not appear in the description.
Please adhere to the following format:

Marker Number: [insert the number of the first marker here]
Description: [provide a description corresponding to the first marker here]

Marker Number: [insert the number of the second marker here]
Description: [provide a description corresponding to the second marker here]

...

Marker Number: [insert the number of the last marker here]
Description: [provide a description corresponding to the last marker here]
"""

MEMORY_RETRIEVAL = """\
Based on the provided descriptions for each number, please select at most three number whose corresponding descriptions are most likely to help identify the {goal_object}.
{entries}
If the total number is less than 3, please use -1 to occupy the empty position.
Please adhere to the following format for the output:

Number List: [first number, second number, third number]
"""

MARKER_SELECTION = """\
You are a robot and after 360 degrees observation, you can see the given panorama image. The panorama image combines 4 images from different angles.
Your task is to find the {goal_object}.
Based on the numerical markers in the image, select one of these numbers to move next.
If you're not confident in moving to the marker to find the {goal_object}, you can choose one of the numerical markers located outside of this image.
The descriptions of these markers are as follows:

{entries}

If you're still not confident in moving to the marker to find the {goal_object}, your action should be 'None'.
The blue circle marker on the floor indicates the previously explored position. It is better to choose a numeric marker that is not close to the blue circle marker.
Please note all closed doors cannot be opened.
Please follow the format like this,

Thought: [put your step-by-step thinking process here]

Action: [put a single marker id or None here]
"""

RATIONALE_GENERATION = """\
You are given an image with a red movement trajectory on it. Please first identify the objects near the red line in the given image. If there is no red trajectory in the image, please directly return "None". Second, knowning that {goal_object} could be found after following the red trajectory, you need to predict the location of {goal_object} or the region where {goal_object} could be most likely located. This can be achieved by reasonably imagining the unseen areas after the red trajectory based on the room layout.
**Do not mention the red trajectory/line or "the image" in your output!**
Please structure your output in the following way:
OBJECTS_RED_LINE:
LOCATION_PREDICTION_AND_REASONING:
"""

RATIONALE_FILTER = """\
You are given an image with a movement trajectory marked in a red line. Please first verify if all of the objects in a given list are present near the red line in the given image. If there is no red line in the image or any of the objects not present, please ignore the rest and directly return "NONE".
Second, verify if the reasonings of why {goal_object} may be put close to the objects in the list. A good reasoning should be logical and perfectly reflect common sense knowledge. A good reasoning gives convincing reasons while a bad reasoning gives vague or untruthful reasons. If the reasonings are good, output "GOOD REASONINGS", otherwise, output "BAD REASONINGS".
Example of a good reasoning: "The book is most likely located on the shelves in the background. The shelves are a common place for storing books, and they are visible in the room at the end of the path.".
Example of a bad reasoning: "The mirror is most likely located on the dark wall to the right of the doorway. This is inferred from the visible portion of the mirror reflecting the room, indicating its position on the dark wall.".
Please structure your output in the following way:
OBJECTS_PRESENCE_CHECK:
REASONING_CHECK:
Object list: {object_list}
Reasonings: {reasonings}
"""

_OPENINGS = {
    PromptKind.MARKER_DESCRIPTION: "You are an automated system",
    PromptKind.MEMORY_RETRIEVAL: "Based on the provided descriptions",
    PromptKind.MARKER_SELECTION: "You are a robot and after 360 degrees",
    PromptKind.RATIONALE_GENERATION: "You are given an image with a red movement trajectory",
    PromptKind.RATIONALE_FILTER: "You are given an image with a movement trajectory marked",
}


def classify_prompt(text: str) -> PromptKind | None:
    """Recover the template kind from a rendered prompt."""
    for kind, opening in _OPENINGS.items():
        if text.startswith(opening):
            return kind
    return None


def marker_description_prompt() -> str:
    return MARKER_DESCRIPTION


def memory_retrieval_prompt(goal_object: str, entries) -> str:
    body = "; ".join(f"{i}: {d}" for i, d in entries)
    return MEMORY_RETRIEVAL.format(goal_object=goal_object, entries=body)


def marker_selection_prompt(goal_object: str, entries) -> str:
    body = "\n".join(f"{i}: {d}" for i, d in entries) if entries else "(none)"
    return MARKER_SELECTION.format(goal_object=goal_object, entries=body)


def correction_suffix(legal_ids) -> str:
    ids = ", ".join(str(i) for i in legal_ids)
    return (
        f"\nYour previous answer named a marker that does not exist. "
        f"The only valid marker ids are: {ids}. Answer again using one of them or None."
    )


def rationale_generation_prompt(goal_object: str) -> str:
    return RATIONALE_GENERATION.format(goal_object=goal_object)


def rationale_filter_prompt(goal_object: str, object_list: str, reasonings: str) -> str:
    return RATIONALE_FILTER.format(goal_object=goal_object, object_list=object_list, reasonings=reasonings)


def build_prompt(kind, context=None) -> str:
    """Render a prompt of ``kind`` for a :class:`~egonav.policy.PolicyContext`."""
    kind = PromptKind(kind)
    if kind is PromptKind.MARKER_DESCRIPTION:
        return marker_description_prompt()
    if kind is PromptKind.MEMORY_RETRIEVAL:
        return memory_retrieval_prompt(context.goal_category, context.retrieval_entries())
    if kind is PromptKind.MARKER_SELECTION:
        return marker_selection_prompt(context.goal_category, context.digest.entries)
    raise ValueError(f"{kind} prompts need rationale inputs; use the dedicated builders")
