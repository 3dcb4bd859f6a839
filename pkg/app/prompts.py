"""Default caption-generation and judge prompts"""

from app.schemas import PromptBundle


GENERATION_PROMPT = "Provide a one-sentence caption for the provided image."


EVAL_PROMPT_REF_BASED = """You will be given one sentence of visual caption generated from one image.

Your task is to rate the generated caption on one metric.

Please make sure you read and understand these reference captions carefully. Please keep these references open while reviewing, and refer to them as needed.

Evaluation Criteria:

Score is from 0 to 100 - selection of important content from the references and the image. The generated caption should accurately describe the important aspects of the image while including the essential information from the references. Annotators were instructed to penalize captions which contained redundancies and excess information.

Evaluation Steps:

1. Carefully observe the provided image to understand its main content.
2. Read the reference captions carefully to identify the important information they highlight.
3. Compare the generated caption to both the reference captions and the visual content of the image.
4. Assess how well the generated caption covers the main points of the visual content and the reference captions, and how much irrelevant or redundant information it contains.
5. Assign an integer score from 0 to 100, considering both the alignment with the image and the inclusion of key points from the references. Please remember the score.

Reference captions:
{{Reference}}

Image is attached

Generated captions:
{{Caption}}

Response Format:

You should first give a detailed reason for your score, ending with a sentence like this:
The final score is $<score>$.

Note that the score should be an integer from 0 to 100, and should be wrapped in dollar signs ($)."""


EVAL_PROMPT_REF_FREE = """You will be given one sentence of visual caption generated from one image.

Your task is to rate the generated caption on one metric.

Evaluation Criteria:

Score is from 0 to 100 - selection of important content from the image. The generated caption should accurately describe the important aspects of the image. Annotators were instructed to penalize captions which contained redundancies and excess information.

Evaluation Steps:

1. Carefully observe the image provided.
2. Identify the main points of the visual content in the image.
3. Assess how well the generated caption covers the main points of the visual content, and how much irrelevant or redundant information it contains.
4. Assign an integer score from 0 to 100, please remember it.

Generated captions:
{{Caption}}

Response Format:

You should first give detailed reason for your score, and ending with sentence like this:
The final score is $<score>$.

Note that the score should be an integer from 0 to 100, and should be wrapped in the dollar signs ($)."""


DEFAULT_BUNDLE = PromptBundle(
    generation_prompt=GENERATION_PROMPT,
    eval_prompt_ref_based=EVAL_PROMPT_REF_BASED,
    eval_prompt_ref_free=EVAL_PROMPT_REF_FREE,
)
