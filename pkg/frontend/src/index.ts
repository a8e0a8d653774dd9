import { ApiClient } from "./api.js";
import { mount } from "./view.js";

const params = new URLSearchParams(window.location.search);
const base = params.get("service") ?? window.location.origin;
mount(new ApiClient(base));
