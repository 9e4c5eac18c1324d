//! Task prompt templates. The thinking suffix is appended to every task prompt.

pub fn rec_prompt(query: &str) -> String {
    format!("Please provide the bounding box coordinates of the region this sentence describes: {query}.")
}

pub fn ovd_prompt(target_list: &str) -> String {
    format!(
        "Please carefully check the image and detect the following objects: {target_list}.\n\
Output each detected target's bbox coordinates in JSON format. The format of the bbox coordinates is:\n\
```json\n\
[\n\
{{\n    \"bbox_2d\": [x1, y1, x2, y2], \n    \"label\": \"category name\"\n}},\n\
{{\n    \"bbox_2d\": [x1, y1, x2, y2], \n    \"label\": \"category name\"\n}}\n\
]\n\
```\n\
If there are no such targets in the image, simply respond with None."
    )
}

pub fn gres_prompt(query: &str) -> String {
    format!(
        "Please carefully check the image and answer: {query}. Based on your answer, detect all relevant objects in the image. \
Output each detected target's bbox coordinates in JSON format. The format of the bbox coordinates is:\n\
```json\n\
[\n\
{{\n    \"bbox_2d\": [x1, y1, x2, y2], \n    \"keypoint1\": [x3, y3], \n    \"keypoint2\": [x4, y4]\n}},\n\
{{\n    \"bbox_2d\": [x1, y1, x2, y2],\n    \"keypoint1\": [x3, y3],\n    \"keypoint2\": [x4, y4]\n}}\n\
]\n\
```"
    )
}

pub fn with_thinking(problem: &str) -> String {
    format!(
        "{problem} Output the thinking process in <think> </think> and final answer in <answer> </answer> tags."
    )
}
